#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "infolens/error.hpp"
#include "infolens/linalg.hpp"

namespace infolens {

enum class Channel { shape, texture, both };
enum class FeatureSpace { pixel, coefficient };

inline constexpr std::string_view to_string(Channel c) {
  switch (c) {
    case Channel::shape: return "shape";
    case Channel::texture: return "texture";
    case Channel::both: return "both";
  }
  return "?";
}

inline Channel parse_channel(std::string_view s) {
  if (s == "shape") return Channel::shape;
  if (s == "texture") return Channel::texture;
  if (s == "both") return Channel::both;
  fail(ErrorCode::invalid_config, "unknown channel '" + std::string(s) + "'");
}

inline constexpr std::string_view to_string(FeatureSpace f) {
  return f == FeatureSpace::pixel ? "pixel" : "coefficient";
}

inline FeatureSpace parse_feature_space(std::string_view s) {
  if (s == "pixel") return FeatureSpace::pixel;
  if (s == "coefficient") return FeatureSpace::coefficient;
  fail(ErrorCode::invalid_config, "unknown feature space '" + std::string(s) + "'");
}

/// Layout of stimulus features on a 2-D grid; each feature spans `dims` adjacent columns of S.
struct FeatureGrid {
  int rows = 0;
  int cols = 0;
  int dims = 1;

  int n_features() const { return rows * cols; }
  int n_columns() const { return rows * cols * dims; }
  bool operator==(const FeatureGrid&) const = default;
};

/**
 * Trial-aligned stimulus features S, layer captures L, and decision values R,
 * with identity / viewpoint / replicate labels per row.
 */
struct TrialSet {
  Matrix S;
  FeatureSpace space = FeatureSpace::pixel;
  FeatureGrid grid;
  int image_height = 0;
  int image_width = 0;
  Matrix images;        // n x (H*W); left empty when S already holds pixels
  Matrix coefficients;  // n x (shape dims + texture dims), the rendered coefficient vectors
  Channel channel = Channel::texture;
  std::vector<int> identity;
  std::vector<int> viewpoint;
  std::vector<int> replicate;
  std::map<std::string, Matrix> L;
  Vector R;

  Eigen::Index size() const { return S.rows(); }

  const Matrix& pixels() const { return space == FeatureSpace::pixel ? S : images; }

  std::vector<Eigen::Index> rows_where_viewpoint(int deg) const {
    std::vector<Eigen::Index> out;
    for (std::size_t i = 0; i < viewpoint.size(); ++i)
      if (viewpoint[i] == deg) out.push_back(static_cast<Eigen::Index>(i));
    return out;
  }

  std::vector<int> distinct_viewpoints() const {
    std::vector<int> out;
    for (int v : viewpoint)
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    std::sort(out.begin(), out.end());
    return out;
  }

  void check_aligned() const {
    const auto n = static_cast<std::size_t>(size());
    bool ok = identity.size() == n && viewpoint.size() == n && replicate.size() == n;
    ok = ok && (R.size() == 0 || static_cast<std::size_t>(R.size()) == n);
    for (const auto& [name, m] : L) ok = ok && static_cast<std::size_t>(m.rows()) == n;
    if (!ok) fail(ErrorCode::invalid_data, "trial set rows are not aligned across S, L, R and labels");
  }

  /// Rows in the given order; captures and R follow.
  TrialSet subset(std::span<const Eigen::Index> rows) const {
    auto take = [&](const Matrix& m) {
      if (m.size() == 0) return Matrix();
      Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
      return out;
    };
    TrialSet out;
    out.S = take(S);
    out.space = space;
    out.grid = grid;
    out.image_height = image_height;
    out.image_width = image_width;
    out.images = take(images);
    out.coefficients = take(coefficients);
    out.channel = channel;
    for (auto r : rows) {
      const auto i = static_cast<std::size_t>(r);
      out.identity.push_back(identity[i]);
      out.viewpoint.push_back(viewpoint[i]);
      out.replicate.push_back(replicate[i]);
    }
    for (const auto& [name, m] : L) out.L[name] = take(m);
    if (R.size() > 0) {
      out.R.resize(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) out.R[static_cast<Eigen::Index>(i)] = R[rows[i]];
    }
    return out;
  }
};

}  // namespace infolens
