#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include "infolens/analysis.hpp"
#include "infolens/error.hpp"
#include "infolens/io.hpp"
#include "infolens/linalg.hpp"

namespace infolens {

enum class Colormap { sequential, diverging };

inline Colormap parse_colormap(std::string_view s) {
  if (s == "sequential") return Colormap::sequential;
  if (s == "diverging") return Colormap::diverging;
  fail(ErrorCode::invalid_config, "unknown colormap '" + std::string(s) + "'");
}

struct Rgb {
  int r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

namespace detail {

struct ColorStop {
  double t;
  Rgb c;
};

// Sequential: black through cyan to white. Diverging: blue, white, red.
inline constexpr std::array<ColorStop, 4> kSequential{{{0.0, {12, 12, 28}},
                                                       {0.35, {20, 90, 140}},
                                                       {0.7, {40, 200, 220}},
                                                       {1.0, {240, 255, 255}}}};
inline constexpr std::array<ColorStop, 3> kDiverging{{{0.0, {40, 70, 170}}, {0.5, {247, 247, 247}}, {1.0, {180, 30, 40}}}};

template <std::size_t N>
Rgb interpolate(const std::array<ColorStop, N>& stops, double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  for (std::size_t i = 1; i < N; ++i) {
    if (t <= stops[i].t) {
      const double u = (t - stops[i - 1].t) / (stops[i].t - stops[i - 1].t);
      auto mix = [u](int a, int b) { return static_cast<int>(std::lround(a + u * (b - a))); };
      return {mix(stops[i - 1].c.r, stops[i].c.r), mix(stops[i - 1].c.g, stops[i].c.g),
              mix(stops[i - 1].c.b, stops[i].c.b)};
    }
  }
  return stops[N - 1].c;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string hex(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

}  // namespace detail

/// Maps v into a colour. Sequential spans [lo, hi]; diverging is symmetric about 0 with half-width max(|lo|, |hi|).
inline Rgb colormap_color(Colormap cm, double v, double lo, double hi) {
  if (cm == Colormap::sequential) {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    return detail::interpolate(detail::kSequential, t);
  }
  const double half = std::max(std::abs(lo), std::abs(hi));
  const double t = half > 0.0 ? 0.5 + 0.5 * v / half : 0.5;
  return detail::interpolate(detail::kDiverging, t);
}

struct HeatmapOptions {
  Colormap colormap = Colormap::sequential;
  std::string title;
  std::optional<double> threshold;  // shown in the legend
  int cell_px = 12;
};

/// One <rect class="cell"> per entry of a rows x cols grid (row-major values), plus a legend.
inline std::string render_heatmap(const Vector& values, int rows, int cols, const HeatmapOptions& opt) {
  if (rows < 1 || cols < 1 || values.size() != static_cast<Eigen::Index>(rows) * cols)
    fail(ErrorCode::invalid_geometry, "grid " + std::to_string(rows) + "x" + std::to_string(cols) + " does not match " +
                                          std::to_string(values.size()) + " values");
  if (!values.allFinite()) fail(ErrorCode::invalid_data, "heatmap values must be finite");
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  // Sequential maps anchor at 0 so an all-zero map is one flat colour.
  const double seq_lo = std::min(lo, 0.0);
  const int cell = opt.cell_px;
  const int legend_h = 56;
  const int width = std::max(cols * cell, 220);
  const int height = rows * cell + legend_h;

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + std::to_string(width) +
       "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) + " " +
       std::to_string(height) + "\">\n";
  if (!opt.title.empty()) s += "<title>" + opt.title + "</title>\n";
  s += "<g id=\"cells\" shape-rendering=\"crispEdges\">\n";
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double v = values[static_cast<Eigen::Index>(r) * cols + c];
      const Rgb col = colormap_color(opt.colormap, v, opt.colormap == Colormap::sequential ? seq_lo : lo, hi);
      s += "<rect class=\"cell\" x=\"" + std::to_string(c * cell) + "\" y=\"" + std::to_string(r * cell) +
           "\" width=\"" + std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" +
           detail::hex(col) + "\"/>\n";
    }
  s += "</g>\n<g id=\"legend\" font-family=\"monospace\" font-size=\"10\">\n";
  const int y0 = rows * cell + 6;
  constexpr int kSwatches = 10;
  for (int i = 0; i < kSwatches; ++i) {
    const double t = static_cast<double>(i) / (kSwatches - 1);
    const double a = opt.colormap == Colormap::sequential ? seq_lo : -std::max(std::abs(lo), std::abs(hi));
    const double b = opt.colormap == Colormap::sequential ? hi : std::max(std::abs(lo), std::abs(hi));
    const Rgb col = colormap_color(opt.colormap, a + t * (b - a), opt.colormap == Colormap::sequential ? seq_lo : lo, hi);
    s += "<rect class=\"swatch\" x=\"" + std::to_string(4 + i * 12) + "\" y=\"" + std::to_string(y0) +
         "\" width=\"12\" height=\"10\" fill=\"" + detail::hex(col) + "\"/>\n";
  }
  s += "<text x=\"4\" y=\"" + std::to_string(y0 + 24) + "\">min " + detail::num(lo) + " max " + detail::num(hi) +
       "</text>\n";
  s += "<text x=\"4\" y=\"" + std::to_string(y0 + 38) + "\">threshold " +
       (opt.threshold ? detail::num(*opt.threshold) : std::string("none")) + "</text>\n";
  s += "</g>\n</svg>\n";
  return s;
}

/// Thresholded feature map on its grid. Negative values (synergy) are clamped at 0 for display.
inline std::string render_feature_map(const FeatureMap& map, Colormap cm = Colormap::sequential) {
  if (map.grid.n_features() != map.values.size())
    fail(ErrorCode::invalid_geometry, "map has " + std::to_string(map.values.size()) + " values but grid has " +
                                          std::to_string(map.grid.n_features()) + " cells");
  HeatmapOptions opt;
  opt.colormap = cm;
  opt.threshold = map.threshold;
  opt.title = std::string(to_string(map.kind)) + (map.pc_index >= 0 ? " pc" + std::to_string(map.pc_index + 1) : "") +
              (map.viewpoint ? " viewpoint " + std::to_string(*map.viewpoint) : "");
  return render_heatmap(map.thresholded().cwiseMax(0.0), map.grid.rows, map.grid.cols, opt);
}

inline void write_svg_heatmap(const FeatureMap& map, const fs::path& path, Colormap cm = Colormap::sequential) {
  write_text_atomic(path, render_feature_map(map, cm));
}

}  // namespace infolens
