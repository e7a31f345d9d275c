#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "infolens/analysis.hpp"
#include "infolens/config.hpp"
#include "infolens/genmodel.hpp"
#include "infolens/network.hpp"

namespace infolens {

struct PlantedSetup {
  GenerativeModel model;
  std::vector<Identity> identities;
  LabelledImages images;
};

inline PlantedSetup build_planted(const RunConfig& cfg) {
  cfg.validate();
  const StageSeeds seeds = cfg.seeds();
  PlantedSetup s;
  s.model = build_generative_model(cfg.generator(), seeds.generator);
  s.identities = planted_identities(s.model, cfg.planted.n_identities, cfg.planted.task);
  s.images = generate_planted_images(s.model, s.identities, cfg.planted.task, cfg.planted.renders_per_identity,
                                     derive_seed(seeds.generator, "renders"));
  return s;
}

inline std::vector<int> grid_viewpoints() {
  return std::vector<int>(kExtrinsicGridDeg.begin(), kExtrinsicGridDeg.end());
}

/// Noisy renders of the target identity at every viewpoint (frontal light).
inline TrialSet analysis_trials(const RunConfig& cfg, const PlantedSetup& s) {
  const auto& a = cfg.analysis;
  const std::vector<Identity> target{s.identities[static_cast<std::size_t>(a.target_id)]};
  const NoiseSpec noise{a.noise_channel, a.noise_proportion, cfg.seeds().noise};
  TrialSetOptions opt;
  opt.space = a.feature_space;
  return generate_trialset(target, grid_viewpoints(), a.trials_per_viewpoint, noise, s.model, opt);
}

/// Ground-truth masks of the planted regions in the trial set's feature space.
inline Vector planted_mask(const RunConfig& cfg, const PlantedSetup& s, std::span<const int> regions,
                           std::optional<int> viewpoint) {
  if (cfg.analysis.feature_space == FeatureSpace::coefficient) {
    Vector m = Vector::Zero(s.model.render.texture_dims());
    for (int r : regions) m[r] = 1.0;
    return m;
  }
  const Vector shape = s.model.shape_coefficients(s.identities[static_cast<std::size_t>(cfg.analysis.target_id)]);
  auto one = [&](int vp) {
    Extrinsics e;
    e.viewpoint_deg = vp;
    return texture_region_mask(shape, regions, e, s.model.render);
  };
  if (viewpoint) return one(*viewpoint);
  Vector m = Vector::Zero(s.model.render.n_pixels());
  for (int vp : grid_viewpoints()) m = m.cwiseMax(one(vp));
  return m;
}

/// Fraction of the top floor(f/10) features (ties by index) that fall inside the mask.
inline double top_decile_in_mask(const Vector& values, const Vector& mask) {
  if (values.size() != mask.size()) fail(ErrorCode::invalid_geometry, "mask and map differ in length");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(values.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return values[a] > values[b]; });
  const auto top = std::max<std::size_t>(1, idx.size() / 10);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < top; ++i) inside += mask[idx[i]] > 0.0 ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(top);
}

inline double masked_mean(const Vector& values, const Vector& mask) {
  const double n = mask.sum();
  return n > 0.0 ? values.cwiseProduct(mask).sum() / n : std::numeric_limits<double>::quiet_NaN();
}

struct PlantedViewScore {
  std::optional<int> viewpoint;
  double diagnostic_in_mask = 0.0;
  double layer_threshold = std::numeric_limits<double>::quiet_NaN();  // max over PCs
  double decision_layer = 0.0;   // region means of max-over-PC maps
  double unused_layer = 0.0;
  double decision_redundancy = 0.0;
  double unused_redundancy = 0.0;
};

struct PlantedScores {
  std::vector<PlantedViewScore> views;
  double min_diagnostic_in_mask = 0.0;
  double layer_threshold = 0.0;  // averages over views
  double decision_layer = 0.0;
  double unused_layer = 0.0;
  double decision_redundancy = 0.0;
  double unused_redundancy = 0.0;

  bool unused_represented() const { return unused_layer > layer_threshold; }
  bool decision_retained() const { return decision_redundancy > layer_threshold; }
  bool unused_dropped(double factor = 0.2) const { return unused_redundancy <= factor * decision_redundancy; }
};

inline PlantedScores score_planted(const RunConfig& cfg, const PlantedSetup& s, std::span<const FeatureMap> diagnostic,
                                   std::span<const FeatureMap> layer, std::span<const FeatureMap> redundancy) {
  const int n_pcs = cfg.analysis.n_pcs;
  if (layer.size() != redundancy.size() || layer.size() != diagnostic.size() * static_cast<std::size_t>(n_pcs))
    fail(ErrorCode::invalid_data, "map lists do not line up");
  const auto& task = cfg.planted.task;
  PlantedScores out;
  out.min_diagnostic_in_mask = 1.0;
  for (std::size_t v = 0; v < diagnostic.size(); ++v) {
    PlantedViewScore sc;
    sc.viewpoint = diagnostic[v].viewpoint;
    const Vector dmask = planted_mask(cfg, s, task.decision_regions, sc.viewpoint);
    const Vector umask = planted_mask(cfg, s, task.unused_regions, sc.viewpoint);
    sc.diagnostic_in_mask = top_decile_in_mask(diagnostic[v].values, dmask);
    const auto lv = layer.subspan(v * static_cast<std::size_t>(n_pcs), static_cast<std::size_t>(n_pcs));
    const auto rv = redundancy.subspan(v * static_cast<std::size_t>(n_pcs), static_cast<std::size_t>(n_pcs));
    const Vector lmax = max_over_maps(lv);
    const Vector rmax = max_over_maps(rv);
    for (const auto& m : lv)
      if (m.threshold) sc.layer_threshold = std::isnan(sc.layer_threshold) ? *m.threshold : std::max(sc.layer_threshold, *m.threshold);
    sc.decision_layer = masked_mean(lmax, dmask);
    sc.unused_layer = masked_mean(lmax, umask);
    sc.decision_redundancy = masked_mean(rmax, dmask);
    sc.unused_redundancy = masked_mean(rmax, umask);
    out.min_diagnostic_in_mask = std::min(out.min_diagnostic_in_mask, sc.diagnostic_in_mask);
    out.views.push_back(sc);
  }
  const double n = static_cast<double>(out.views.size());
  for (const auto& sc : out.views) {
    out.layer_threshold += sc.layer_threshold / n;
    out.decision_layer += sc.decision_layer / n;
    out.unused_layer += sc.unused_layer / n;
    out.decision_redundancy += sc.decision_redundancy / n;
    out.unused_redundancy += sc.unused_redundancy / n;
  }
  return out;
}

inline Json to_json(const PlantedScores& s) {
  Json views = Json::array();
  for (const auto& v : s.views)
    views.push_back(Json{{"viewpoint", v.viewpoint ? Json(*v.viewpoint) : Json(nullptr)},
                         {"diagnostic_top_decile_in_mask", v.diagnostic_in_mask},
                         {"layer_threshold", std::isnan(v.layer_threshold) ? Json(nullptr) : Json(v.layer_threshold)},
                         {"decision_layer_mean", v.decision_layer},
                         {"unused_layer_mean", v.unused_layer},
                         {"decision_redundancy_mean", v.decision_redundancy},
                         {"unused_redundancy_mean", v.unused_redundancy}});
  auto num = [](double x) { return std::isnan(x) ? Json(nullptr) : Json(x); };
  return Json{{"views", views},
              {"min_diagnostic_top_decile_in_mask", s.min_diagnostic_in_mask},
              {"layer_threshold", num(s.layer_threshold)},
              {"decision_layer_mean", num(s.decision_layer)},
              {"unused_layer_mean", num(s.unused_layer)},
              {"decision_redundancy_mean", num(s.decision_redundancy)},
              {"unused_redundancy_mean", num(s.unused_redundancy)},
              {"unused_represented", s.unused_represented()},
              {"decision_retained", s.decision_retained()},
              {"unused_dropped", s.unused_dropped()}};
}

struct PipelineResult {
  PlantedSetup setup;
  NetSpec spec;
  TrainResult training;
  TrialSet trials;
  PcaModel pca;
  std::vector<FeatureMap> diagnostic;  // one per viewpoint, or one pooled
  std::vector<FeatureMap> layer_pc;    // view-major, then PC
  std::vector<FeatureMap> redundancy;
  std::optional<ViewpointConsistency> consistency;
  RdmResult rdm;
  RobustnessReport robustness;
  PlantedScores scores;
};

inline std::vector<FeatureMap> diagnostic_maps(const TrialSet& ts, bool per_viewpoint, const MapOptions& opt) {
  std::vector<FeatureMap> out;
  for (const auto& [vp, rows] : detail::row_groups(ts, per_viewpoint)) {
    MapOptions o = opt;
    o.seed = derive_seed(opt.seed, static_cast<std::uint64_t>(out.size()));
    FeatureMap m = diagnostic_map(per_viewpoint ? ts.subset(rows) : ts, o);
    m.viewpoint = vp;
    out.push_back(std::move(m));
  }
  return out;
}

/// End-to-end planted run: generate, train, capture, map, RDM, robustness, score.
inline PipelineResult run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  const StageSeeds seeds = cfg.seeds();
  const auto& a = cfg.analysis;
  PipelineResult r;
  r.setup = build_planted(cfg);
  r.spec = cfg.net_spec();
  TrainConfig tc = cfg.train;
  tc.seed = seeds.train;
  r.training = train(r.spec, r.setup.images.images, r.setup.images.labels, tc);

  r.trials = analysis_trials(cfg, r.setup);
  attach_network(r.trials, r.spec, r.training.params, a.target_id, a.decision_value);
  const MapOptions opt = cfg.map_options();
  r.diagnostic = diagnostic_maps(r.trials, a.per_viewpoint, opt);
  if (r.diagnostic.size() >= 2) {
    try {
      r.consistency = viewpoint_consistency(r.diagnostic);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::degenerate_map) throw;
    }
  }
  r.pca = layer_pca(r.trials, "pool", a.n_pcs, seeds.pca);
  r.layer_pc = layer_pc_maps(r.trials, r.pca, a.n_pcs, a.per_viewpoint, opt);
  r.redundancy = decision_redundancy_maps(r.trials, r.pca, a.n_pcs, a.per_viewpoint, opt);
  r.rdm = rdm_pipeline(r.trials, "pool", a.n_pcs, seeds.pca, a.rdm_rows_per_viewpoint);
  r.robustness = noise_robustness_test(r.spec, r.training.params, r.setup.model,
                                       r.setup.identities[static_cast<std::size_t>(a.target_id)], a.noise_channel,
                                       a.robustness_proportions, a.robustness_trials, seeds.robustness);
  if (a.noise_channel == Channel::texture)
    r.scores = score_planted(cfg, r.setup, r.diagnostic, r.layer_pc, r.redundancy);
  return r;
}

}  // namespace infolens
