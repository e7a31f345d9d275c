#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "infolens/error.hpp"
#include "infolens/genmodel.hpp"
#include "infolens/infotheory.hpp"
#include "infolens/linalg.hpp"
#include "infolens/network.hpp"
#include "infolens/random.hpp"
#include "infolens/trialset.hpp"

namespace infolens {

enum class MapKind { diagnostic, layer_pc, redundancy };

inline constexpr std::string_view to_string(MapKind k) {
  switch (k) {
    case MapKind::diagnostic: return "diagnostic";
    case MapKind::layer_pc: return "layer_pc";
    case MapKind::redundancy: return "redundancy";
  }
  return "?";
}

struct FeatureMap {
  MapKind kind = MapKind::diagnostic;
  Vector values;                    // bits per feature; degenerate features hold 0
  std::optional<double> threshold;  // max-statistic 95th percentile when a null was run
  FeatureGrid grid;
  int pc_index = -1;                // 0-based; -1 for diagnostic maps
  std::optional<int> viewpoint;     // set for per-viewpoint maps
  std::vector<Eigen::Index> degenerate;
  std::vector<std::string> warnings;

  Vector thresholded() const {
    if (!threshold) return values;
    return (values.array() > *threshold).select(values, 0.0);
  }
};

struct MapOptions {
  int n_permutations = 0;  // 0 disables the permutation threshold
  std::uint64_t seed = 0;
  bool bias_correct = true;
  int feature_dims = 0;    // 0: take dims from the trial set's grid
};

inline constexpr Eigen::Index kRecommendedTrials = 500;

namespace detail {

inline FeatureGrid map_grid(const TrialSet& ts, int feature_dims) {
  if (feature_dims == 0 || feature_dims == ts.grid.dims) return ts.grid;
  if (feature_dims < 1 || ts.S.cols() % feature_dims != 0)
    fail(ErrorCode::invalid_geometry, "S has " + std::to_string(ts.S.cols()) + " columns, not a multiple of " +
                                          std::to_string(feature_dims));
  return FeatureGrid{1, static_cast<int>(ts.S.cols() / feature_dims), feature_dims};
}

inline void check_map_input(const TrialSet& ts, const FeatureGrid& grid) {
  ts.check_aligned();
  if (grid.n_columns() != ts.S.cols())
    fail(ErrorCode::invalid_geometry, "grid describes " + std::to_string(grid.n_columns()) + " columns but S has " +
                                          std::to_string(ts.S.cols()));
}

inline FeatureMap collect(MapKind kind, const FeatureGrid& grid, const std::vector<std::optional<double>>& mi) {
  FeatureMap map;
  map.kind = kind;
  map.grid = grid;
  map.values = Vector::Zero(static_cast<Eigen::Index>(mi.size()));
  for (std::size_t k = 0; k < mi.size(); ++k) {
    if (mi[k])
      map.values[static_cast<Eigen::Index>(k)] = *mi[k];
    else
      map.degenerate.push_back(static_cast<Eigen::Index>(k));
  }
  return map;
}

inline FeatureMap mi_map(MapKind kind, const FeatureGrid& grid, const CopulaMatrix& s, const CopulaMatrix& response,
                         const MapOptions& opt, std::uint64_t seed) {
  const FeatureMi engine(s, grid.dims, response, opt.bias_correct);
  FeatureMap map = collect(kind, grid, engine.compute());
  if (opt.n_permutations > 0) map.threshold = permutation_null(engine, opt.n_permutations, seed).percentile_95;
  if (s.rows() < kRecommendedTrials)
    map.warnings.push_back("only " + std::to_string(s.rows()) + " trials; at least " +
                           std::to_string(kRecommendedTrials) + " are recommended");
  return map;
}

inline Matrix column(const Vector& v) { return Matrix(v); }

// Row subsets: all rows, or one subset per viewpoint (ascending).
inline std::vector<std::pair<std::optional<int>, std::vector<Eigen::Index>>> row_groups(const TrialSet& ts,
                                                                                        bool per_viewpoint) {
  std::vector<std::pair<std::optional<int>, std::vector<Eigen::Index>>> out;
  if (!per_viewpoint) {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(ts.size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Eigen::Index>(i);
    out.emplace_back(std::nullopt, std::move(all));
    return out;
  }
  for (int v : ts.distinct_viewpoints()) out.emplace_back(v, ts.rows_where_viewpoint(v));
  return out;
}

inline Matrix take_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

inline void check_scores(const TrialSet& ts, const PcaModel& pca, int n_pcs) {
  if (pca.scores.rows() != ts.size())
    fail(ErrorCode::invalid_data, "PCA scores have " + std::to_string(pca.scores.rows()) + " rows, trial set has " +
                                      std::to_string(ts.size()));
  if (n_pcs < 1 || n_pcs > pca.k())
    fail(ErrorCode::invalid_rank, "n_pcs=" + std::to_string(n_pcs) + " but PCA has " + std::to_string(pca.k()));
}

}  // namespace detail

/// MI between each stimulus feature and the decision variable R (cyan map).
inline FeatureMap diagnostic_map(const TrialSet& ts, const MapOptions& opt = {}) {
  const FeatureGrid grid = detail::map_grid(ts, opt.feature_dims);
  detail::check_map_input(ts, grid);
  if (ts.R.size() != ts.size()) fail(ErrorCode::missing_input, "trial set has no decision values R");
  return detail::mi_map(MapKind::diagnostic, grid, copula_transform(ts.S), copula_transform(detail::column(ts.R)),
                        opt, derive_seed(opt.seed, "diagnostic"));
}

/// Randomized PCA of a captured layer over all trials.
inline PcaModel layer_pca(const TrialSet& ts, const std::string& layer, int k, std::uint64_t seed,
                          int oversampling = 10, int power_iterations = 2) {
  const auto it = ts.L.find(layer);
  if (it == ts.L.end()) fail(ErrorCode::missing_input, "no capture for layer '" + layer + "'");
  const Eigen::Index limit = std::min(it->second.rows(), it->second.cols());
  oversampling = static_cast<int>(std::min<Eigen::Index>(oversampling, std::max<Eigen::Index>(0, limit - k)));
  return randomized_pca(it->second, k, oversampling, power_iterations, seed);
}

/// MI between each stimulus feature and each of the first n_pcs layer PC scores (magenta maps).
/// Map order: viewpoint-major, then PC.
inline std::vector<FeatureMap> layer_pc_maps(const TrialSet& ts, const PcaModel& pca, int n_pcs = 6,
                                             bool per_viewpoint = false, const MapOptions& opt = {}) {
  const FeatureGrid grid = detail::map_grid(ts, opt.feature_dims);
  detail::check_map_input(ts, grid);
  detail::check_scores(ts, pca, n_pcs);
  std::vector<FeatureMap> out;
  for (const auto& [vp, rows] : detail::row_groups(ts, per_viewpoint)) {
    const CopulaMatrix s = copula_transform(detail::take_rows(ts.S, rows));
    const Matrix scores = detail::take_rows(pca.scores, rows);
    for (int k = 0; k < n_pcs; ++k) {
      const std::uint64_t seed = derive_seed(derive_seed(opt.seed, "layer_pc"), static_cast<std::uint64_t>(out.size()));
      FeatureMap map = detail::mi_map(MapKind::layer_pc, grid, s, copula_transform(scores.col(k)), opt, seed);
      map.pc_index = k;
      map.viewpoint = vp;
      out.push_back(std::move(map));
    }
  }
  return out;
}

/// Red(S_feature; PC_k; R) per feature and PC (white maps). Negative values (synergy) are kept.
inline std::vector<FeatureMap> decision_redundancy_maps(const TrialSet& ts, const PcaModel& pca, int n_pcs = 6,
                                                        bool per_viewpoint = false, const MapOptions& opt = {}) {
  const FeatureGrid grid = detail::map_grid(ts, opt.feature_dims);
  detail::check_map_input(ts, grid);
  detail::check_scores(ts, pca, n_pcs);
  if (ts.R.size() != ts.size()) fail(ErrorCode::missing_input, "trial set has no decision values R");
  std::vector<FeatureMap> out;
  for (const auto& [vp, rows] : detail::row_groups(ts, per_viewpoint)) {
    const CopulaMatrix s = copula_transform(detail::take_rows(ts.S, rows));
    const CopulaMatrix r = copula_transform(detail::take_rows(detail::column(ts.R), rows));
    const Matrix scores = detail::take_rows(pca.scores, rows);
    for (int k = 0; k < n_pcs; ++k) {
      const FeatureRedundancy engine(s, grid.dims, copula_transform(scores.col(k)), r, opt.bias_correct);
      std::vector<std::optional<double>> red;
      for (const auto& t : engine.compute()) red.push_back(t.bits());
      FeatureMap map = detail::collect(MapKind::redundancy, grid, red);
      map.pc_index = k;
      map.viewpoint = vp;
      out.push_back(std::move(map));
    }
  }
  return out;
}

/// Feature-wise maximum over a set of maps with the same geometry (e.g. all PCs of one viewpoint).
inline Vector max_over_maps(std::span<const FeatureMap> maps) {
  if (maps.empty()) fail(ErrorCode::empty_set, "no maps to combine");
  Vector out = maps.front().values;
  for (const auto& m : maps.subspan(1)) {
    if (m.values.size() != out.size()) fail(ErrorCode::invalid_geometry, "maps differ in length");
    out = out.cwiseMax(m.values);
  }
  return out;
}

struct ViewpointConsistency {
  std::vector<int> viewpoints;
  Matrix correlation;  // pairwise Pearson between unthresholded map values
  double min_correlation = 0.0;
};

inline ViewpointConsistency viewpoint_consistency(std::span<const FeatureMap> maps_by_viewpoint) {
  const auto n = static_cast<Eigen::Index>(maps_by_viewpoint.size());
  if (n < 2) fail(ErrorCode::empty_set, "viewpoint consistency needs at least 2 maps");
  const Eigen::Index f = maps_by_viewpoint.front().values.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector& v = maps_by_viewpoint[static_cast<std::size_t>(i)].values;
    if (v.size() != f) fail(ErrorCode::invalid_geometry, "maps differ in length");
    if (v.size() < 2 || (v.array() == v[0]).all())
      fail(ErrorCode::degenerate_map, "map " + std::to_string(i) + " is constant");
  }
  ViewpointConsistency out;
  out.correlation = Matrix::Identity(n, n);
  out.min_correlation = 1.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.viewpoints.push_back(maps_by_viewpoint[static_cast<std::size_t>(i)].viewpoint.value_or(static_cast<int>(i)));
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double c = pearson(maps_by_viewpoint[static_cast<std::size_t>(i)].values,
                               maps_by_viewpoint[static_cast<std::size_t>(j)].values);
      out.correlation(i, j) = out.correlation(j, i) = c;
      out.min_correlation = std::min(out.min_correlation, c);
    }
  }
  return out;
}

struct RdmResult {
  PcaModel pca;
  Rdm rdm;
  std::vector<Eigen::Index> rows;  // trial rows in RDM order
};

/**
 * PCA of a captured layer, then the RDM of PC score vectors with rows ordered by
 * viewpoint ascending, replicate ascending. rows_per_viewpoint > 0 keeps only the
 * first that many replicates of each viewpoint (an n x n RDM grows quadratically).
 */
inline RdmResult rdm_pipeline(const TrialSet& ts, const std::string& layer, int k = 6, std::uint64_t seed = 0,
                              int rows_per_viewpoint = 0) {
  ts.check_aligned();
  RdmResult out;
  out.pca = layer_pca(ts, layer, k, seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(ts.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
    if (ts.viewpoint[ia] != ts.viewpoint[ib]) return ts.viewpoint[ia] < ts.viewpoint[ib];
    return ts.replicate[ia] < ts.replicate[ib];
  });
  std::vector<int> labels;
  int current = 0, taken = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int vp = ts.viewpoint[static_cast<std::size_t>(order[i])];
    if (i == 0 || vp != current) {
      current = vp;
      taken = 0;
    }
    if (rows_per_viewpoint > 0 && taken >= rows_per_viewpoint) continue;
    ++taken;
    out.rows.push_back(order[i]);
    labels.push_back(vp);
  }
  out.rdm = rdm(detail::take_rows(out.pca.scores, out.rows), std::move(labels));
  return out;
}

// Softmax is unchanged by adding a constant to every logit, so the common-mode part of a raw
// logit is never constrained by training; centered_logit removes it.
enum class DecisionValue { logit, centered_logit };

inline constexpr std::string_view to_string(DecisionValue d) {
  return d == DecisionValue::logit ? "logit" : "centered_logit";
}

inline DecisionValue parse_decision_value(std::string_view s) {
  if (s == "logit") return DecisionValue::logit;
  if (s == "centered_logit") return DecisionValue::centered_logit;
  fail(ErrorCode::invalid_config, "unknown decision value '" + std::string(s) + "'");
}

/// Runs the network over the trial set's pixels; fills L from the capture points and R from the target unit.
inline void attach_network(TrialSet& ts, const NetSpec& spec, const Params& params, int target_id,
                           DecisionValue decision = DecisionValue::logit) {
  if (target_id < 0 || target_id >= spec.n_classes) fail(ErrorCode::invalid_label, "target id out of range");
  const ForwardResult res = forward(spec, params, ts.pixels(), true);
  ts.L = res.captures;
  ts.R = res.logits.col(target_id);
  if (decision == DecisionValue::centered_logit) ts.R -= res.logits.rowwise().mean();
}

struct RobustnessReport {
  Channel channel = Channel::texture;
  int target_id = 0;
  std::vector<double> proportions;
  std::vector<double> accuracy;
  std::vector<std::vector<bool>> accepted;  // per proportion, per trial: argmax == target
};

/**
 * Accuracy of the target identity under noise of increasing proportion. Trial t
 * uses noise seed derive_seed(seed, t) at every proportion, so the proportions
 * differ only in noise amplitude. Viewpoints cycle through the extrinsic grid.
 */
inline RobustnessReport noise_robustness_test(const NetSpec& spec, const Params& params, const GenerativeModel& model,
                                              const Identity& identity, Channel channel,
                                              std::span<const double> proportions, int n_trials, std::uint64_t seed) {
  if (proportions.empty() || n_trials < 1) fail(ErrorCode::invalid_config, "need proportions and n_trials >= 1");
  for (double p : proportions)
    if (!(p >= 0.0) || !std::isfinite(p)) fail(ErrorCode::invalid_scale, "noise proportions must be finite and >= 0");
  RobustnessReport out;
  out.channel = channel;
  out.target_id = identity.id_label;
  out.proportions.assign(proportions.begin(), proportions.end());
  Matrix images(n_trials, model.render.n_pixels());
  for (double p : proportions) {
    for (int t = 0; t < n_trials; ++t) {
      StimulusSpec stim;
      stim.identity = identity;
      stim.extrinsics.viewpoint_deg = kExtrinsicGridDeg[static_cast<std::size_t>(t) % kExtrinsicGridDeg.size()];
      stim.noise = NoiseSpec{channel, p, derive_seed(seed, static_cast<std::uint64_t>(t))};
      images.row(t) = render_stimulus(stim, model).pixels.transpose();
    }
    const Matrix logits = forward(spec, params, images).logits;
    std::vector<bool> ok(static_cast<std::size_t>(n_trials));
    int hits = 0;
    for (int t = 0; t < n_trials; ++t) {
      Eigen::Index arg = 0;
      logits.row(t).maxCoeff(&arg);
      ok[static_cast<std::size_t>(t)] = arg == identity.id_label;
      hits += ok[static_cast<std::size_t>(t)] ? 1 : 0;
    }
    out.accuracy.push_back(static_cast<double>(hits) / n_trials);
    out.accepted.push_back(std::move(ok));
  }
  return out;
}

}  // namespace infolens
