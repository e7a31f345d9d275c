#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "infolens/analysis.hpp"
#include "infolens/error.hpp"
#include "infolens/genmodel.hpp"
#include "infolens/network.hpp"
#include "infolens/random.hpp"
#include "infolens/trialset.hpp"

namespace infolens {

using Json = nlohmann::json;

namespace detail {

// Reads fields of one JSON object, rejecting wrong types and (on finish) unknown keys.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::schema_violation, path_ + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(ErrorCode::schema_violation, where + " must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(ErrorCode::schema_violation, where + " must be an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          fail(ErrorCode::schema_violation, where + " must be non-negative");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(ErrorCode::schema_violation, where + " must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(ErrorCode::schema_violation, where + " must be a string");
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) fail(ErrorCode::schema_violation, where + " must be an array");
      for (const auto& e : v)
        if (!e.is_number_integer()) fail(ErrorCode::schema_violation, where + " must hold integers");
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) fail(ErrorCode::schema_violation, where + " must be an array");
      for (const auto& e : v)
        if (!e.is_number()) fail(ErrorCode::schema_violation, where + " must hold numbers");
    }
    out = v.get<T>();
  }

  const Json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) fail(ErrorCode::schema_violation, "unknown key " + path_ + "." + key);
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---- NetSpec ---------------------------------------------------------------

inline Json to_json(const NetSpec& spec) {
  Json layers = Json::array();
  for (const auto& layer : spec.layers) {
    Json l{{"type", layer_kind(layer)}};
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, Conv3x3>) {
            l["in"] = v.in_channels;
            l["out"] = v.out_channels;
            l["stride"] = v.stride;
          } else if constexpr (std::is_same_v<T, Dense>) {
            l["in"] = v.in;
            l["out"] = v.out;
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            l["channels"] = v.channels;
          } else if constexpr (std::is_same_v<T, Logits>) {
            l["in"] = v.in;
            l["classes"] = v.n_classes;
          }
        },
        layer);
    layers.push_back(l);
  }
  return Json{{"input_height", spec.input_height},
              {"input_width", spec.input_width},
              {"n_classes", spec.n_classes},
              {"input_mean", spec.input_mean},
              {"input_std", spec.input_std},
              {"residual_init_scale", spec.residual_init_scale},
              {"layers", layers},
              {"capture_points", spec.capture_points}};
}

inline NetSpec netspec_from_json(const Json& j) {
  detail::ObjectReader r(j, "netspec");
  NetSpec s;
  r.read("input_height", s.input_height);
  r.read("input_width", s.input_width);
  r.read("n_classes", s.n_classes);
  r.read("input_mean", s.input_mean);
  r.read("input_std", s.input_std);
  r.read("residual_init_scale", s.residual_init_scale);
  const Json& layers = r.child("layers");
  if (!layers.is_array()) fail(ErrorCode::schema_violation, "netspec.layers must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    detail::ObjectReader l(layers[i], "netspec.layers[" + std::to_string(i) + "]");
    std::string type;
    l.read("type", type);
    if (type == "conv3x3") {
      Conv3x3 c;
      l.read("in", c.in_channels);
      l.read("out", c.out_channels);
      l.read("stride", c.stride);
      s.layers.emplace_back(c);
    } else if (type == "dense") {
      Dense d;
      l.read("in", d.in);
      l.read("out", d.out);
      s.layers.emplace_back(d);
    } else if (type == "residual") {
      ResidualBlock b;
      l.read("channels", b.channels);
      s.layers.emplace_back(b);
    } else if (type == "relu") {
      s.layers.emplace_back(Relu{});
    } else if (type == "gap") {
      s.layers.emplace_back(GlobalAvgPool{});
    } else if (type == "logits") {
      Logits g;
      l.read("in", g.in);
      l.read("classes", g.n_classes);
      s.layers.emplace_back(g);
    } else {
      fail(ErrorCode::schema_violation, "unknown layer type '" + type + "'");
    }
    l.finish();
  }
  const Json& caps = r.child("capture_points");
  if (!caps.is_object()) fail(ErrorCode::schema_violation, "netspec.capture_points must be an object");
  for (const auto& [name, idx] : caps.items()) {
    if (!idx.is_number_integer()) fail(ErrorCode::schema_violation, "capture point index must be an integer");
    s.capture_points[name] = idx.get<int>();
  }
  r.finish();
  s.shapes();
  return s;
}

// ---- TrainConfig -----------------------------------------------------------

inline Json to_json(const TrainConfig& c) {
  return Json{{"split_fraction", c.split_fraction},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"momentum", c.momentum},
              {"cosine_decay", c.cosine_decay},
              {"epochs", c.epochs},
              {"augment_probability", c.augment_probability},
              {"scale_min", c.scale_min},
              {"scale_max", c.scale_max},
              {"translate_max", c.translate_max}};
}

inline void read_train(detail::ObjectReader& r, TrainConfig& c) {
  r.read("split_fraction", c.split_fraction);
  r.read("batch_size", c.batch_size);
  r.read("learning_rate", c.learning_rate);
  r.read("momentum", c.momentum);
  r.read("cosine_decay", c.cosine_decay);
  r.read("epochs", c.epochs);
  r.read("augment_probability", c.augment_probability);
  r.read("scale_min", c.scale_min);
  r.read("scale_max", c.scale_max);
  r.read("translate_max", c.translate_max);
  r.finish();
}

// ---- RunConfig -------------------------------------------------------------

struct PlantedConfig {
  int n_identities = 20;
  int renders_per_identity = 200;
  PlantedTask task;
};

struct NetConfig {
  int width1 = 8;
  int width2 = 16;
  int width3 = 32;
};

struct AnalysisConfig {
  int target_id = 0;
  int trials_per_viewpoint = 2000;
  Channel noise_channel = Channel::texture;
  double noise_proportion = 0.8;
  FeatureSpace feature_space = FeatureSpace::pixel;
  int n_pcs = 6;
  int n_permutations = 100;
  bool per_viewpoint = true;
  bool bias_correct = true;
  DecisionValue decision_value = DecisionValue::logit;
  int rdm_rows_per_viewpoint = 100;
  std::vector<double> robustness_proportions{0.0, 0.4, 0.8, 2.0, 4.0};
  int robustness_trials = 200;
};

/// Per-stage seeds, each derive_seed(global, stage name).
struct StageSeeds {
  std::uint64_t generator, noise, train, maps, pca, robustness;

  explicit StageSeeds(std::uint64_t global)
      : generator(derive_seed(global, "generator")),
        noise(derive_seed(global, "noise")),
        train(derive_seed(global, "train")),
        maps(derive_seed(global, "maps")),
        pca(derive_seed(global, "pca")),
        robustness(derive_seed(global, "robustness")) {}

  Json to_json() const {
    return Json{{"generator", generator}, {"noise", noise}, {"train", train},
                {"maps", maps},           {"pca", pca},     {"robustness", robustness}};
  }
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 7;
  PlantedConfig planted;
  NetConfig net;
  TrainConfig train;
  AnalysisConfig analysis;

  static RunConfig from_preset(std::string_view name, std::uint64_t seed) {
    RunConfig c;
    c.seed = seed;
    if (name == "desk") {
      c.preset = "desk";
    } else if (name == "paper") {
      c.preset = "paper";
      c.analysis.trials_per_viewpoint = 10000;
      c.analysis.robustness_trials = 1000;
      c.analysis.n_permutations = 1000;
    } else {
      fail(ErrorCode::invalid_config, "unknown preset '" + std::string(name) + "' (desk | paper)");
    }
    return c;
  }

  GeneratorConfig generator() const { return preset == "paper" ? GeneratorConfig::paper() : GeneratorConfig::desk(); }

  StageSeeds seeds() const { return StageSeeds(seed); }

  NetSpec net_spec() const {
    const RenderConfig rc = generator().render;
    return NetSpec::desk(planted.n_identities, rc.height, rc.width, net.width1, net.width2, net.width3);
  }

  MapOptions map_options() const {
    MapOptions o;
    o.n_permutations = analysis.n_permutations;
    o.seed = seeds().maps;
    o.bias_correct = analysis.bias_correct;
    return o;
  }

  void validate() const {
    if (planted.n_identities < 2) fail(ErrorCode::invalid_config, "planted.n_identities must be >= 2");
    if (planted.renders_per_identity < 1) fail(ErrorCode::invalid_config, "planted.renders_per_identity must be >= 1");
    const int tex = generator().render.texture_dims();
    for (const auto* list : {&planted.task.decision_regions, &planted.task.unused_regions})
      for (int r : *list)
        if (r < 0 || r >= tex) fail(ErrorCode::invalid_config, "region " + std::to_string(r) + " out of range");
    if (planted.task.decision_regions.empty()) fail(ErrorCode::invalid_config, "no decision regions");
    if (!(planted.task.code_amplitude > 0.0) || planted.task.nuisance_sigma < 0.0)
      fail(ErrorCode::invalid_config, "planted code_amplitude must be > 0 and nuisance_sigma >= 0");
    if (net.width1 < 1 || net.width2 < 1 || net.width3 < 1) fail(ErrorCode::invalid_config, "net widths must be >= 1");
    train.validate();
    const auto& a = analysis;
    if (a.target_id < 0 || a.target_id >= planted.n_identities)
      fail(ErrorCode::invalid_config, "analysis.target_id out of range");
    if (a.trials_per_viewpoint < 3) fail(ErrorCode::invalid_config, "analysis.trials_per_viewpoint must be >= 3");
    if (a.noise_channel == Channel::both && a.feature_space == FeatureSpace::coefficient)
      fail(ErrorCode::invalid_config, "coefficient-space maps need a single noise channel");
    if (!(a.noise_proportion > 0.0)) fail(ErrorCode::invalid_config, "analysis.noise_proportion must be > 0");
    if (a.n_pcs < 1) fail(ErrorCode::invalid_config, "analysis.n_pcs must be >= 1");
    if (a.n_permutations != 0 && a.n_permutations < kMinPermutations)
      fail(ErrorCode::invalid_config, "analysis.n_permutations must be 0 or >= " + std::to_string(kMinPermutations));
    if (a.rdm_rows_per_viewpoint < 0) fail(ErrorCode::invalid_config, "analysis.rdm_rows_per_viewpoint must be >= 0");
    if (a.robustness_proportions.empty() || a.robustness_trials < 1)
      fail(ErrorCode::invalid_config, "robustness needs proportions and trials");
    for (double p : a.robustness_proportions)
      if (!(p >= 0.0)) fail(ErrorCode::invalid_config, "robustness proportions must be >= 0");
    net_spec().shapes();
  }

  Json to_json() const {
    const auto& t = planted.task;
    const auto& a = analysis;
    return Json{
        {"preset", preset},
        {"seed", seed},
        {"planted",
         {{"n_identities", planted.n_identities},
          {"renders_per_identity", planted.renders_per_identity},
          {"decision_regions", t.decision_regions},
          {"unused_regions", t.unused_regions},
          {"code_amplitude", t.code_amplitude},
          {"code_min_distance", t.code_min_distance},
          {"nuisance_sigma", t.nuisance_sigma},
          {"randomize_shape", t.randomize_shape},
          {"randomize_illumination", t.randomize_illumination}}},
        {"net", {{"width1", net.width1}, {"width2", net.width2}, {"width3", net.width3}}},
        {"train", infolens::to_json(train)},
        {"analysis",
         {{"target_id", a.target_id},
          {"trials_per_viewpoint", a.trials_per_viewpoint},
          {"noise_channel", std::string(to_string(a.noise_channel))},
          {"noise_proportion", a.noise_proportion},
          {"feature_space", std::string(to_string(a.feature_space))},
          {"n_pcs", a.n_pcs},
          {"n_permutations", a.n_permutations},
          {"per_viewpoint", a.per_viewpoint},
          {"bias_correct", a.bias_correct},
          {"decision_value", std::string(to_string(a.decision_value))},
          {"rdm_rows_per_viewpoint", a.rdm_rows_per_viewpoint},
          {"robustness_proportions", a.robustness_proportions},
          {"robustness_trials", a.robustness_trials}}}};
  }

  /// Schema-checked parse; missing keys take the preset defaults, unknown keys are rejected.
  static RunConfig from_json(const Json& j) {
    detail::ObjectReader root(j, "config");
    std::string preset = "desk";
    std::uint64_t seed = 7;
    root.read("preset", preset);
    root.read("seed", seed);
    RunConfig c = from_preset(preset, seed);
    if (root.has("planted")) {
      detail::ObjectReader r(root.child("planted"), "config.planted");
      r.read("n_identities", c.planted.n_identities);
      r.read("renders_per_identity", c.planted.renders_per_identity);
      r.read("decision_regions", c.planted.task.decision_regions);
      r.read("unused_regions", c.planted.task.unused_regions);
      r.read("code_amplitude", c.planted.task.code_amplitude);
      r.read("code_min_distance", c.planted.task.code_min_distance);
      r.read("nuisance_sigma", c.planted.task.nuisance_sigma);
      r.read("randomize_shape", c.planted.task.randomize_shape);
      r.read("randomize_illumination", c.planted.task.randomize_illumination);
      r.finish();
    }
    if (root.has("net")) {
      detail::ObjectReader r(root.child("net"), "config.net");
      r.read("width1", c.net.width1);
      r.read("width2", c.net.width2);
      r.read("width3", c.net.width3);
      r.finish();
    }
    if (root.has("train")) {
      detail::ObjectReader r(root.child("train"), "config.train");
      read_train(r, c.train);
    }
    if (root.has("analysis")) {
      detail::ObjectReader r(root.child("analysis"), "config.analysis");
      auto& a = c.analysis;
      std::string channel(to_string(a.noise_channel)), space(to_string(a.feature_space)),
          decision(to_string(a.decision_value));
      r.read("target_id", a.target_id);
      r.read("trials_per_viewpoint", a.trials_per_viewpoint);
      r.read("noise_channel", channel);
      r.read("noise_proportion", a.noise_proportion);
      r.read("feature_space", space);
      r.read("n_pcs", a.n_pcs);
      r.read("n_permutations", a.n_permutations);
      r.read("per_viewpoint", a.per_viewpoint);
      r.read("bias_correct", a.bias_correct);
      r.read("decision_value", decision);
      r.read("rdm_rows_per_viewpoint", a.rdm_rows_per_viewpoint);
      r.read("robustness_proportions", a.robustness_proportions);
      r.read("robustness_trials", a.robustness_trials);
      r.finish();
      a.noise_channel = parse_channel(channel);
      a.feature_space = parse_feature_space(space);
      a.decision_value = parse_decision_value(decision);
    }
    root.finish();
    c.validate();
    return c;
  }
};

// ---- FeatureMap metadata ---------------------------------------------------

inline Json map_metadata(const FeatureMap& m) {
  Json j{{"kind", std::string(to_string(m.kind))},
         {"grid", {{"rows", m.grid.rows}, {"cols", m.grid.cols}, {"dims", m.grid.dims}}},
         {"degenerate", m.degenerate}};
  j["threshold"] = m.threshold ? Json(*m.threshold) : Json(nullptr);
  j["pc"] = m.pc_index >= 0 ? Json(m.pc_index + 1) : Json(nullptr);
  j["viewpoint"] = m.viewpoint ? Json(*m.viewpoint) : Json(nullptr);
  if (!m.warnings.empty()) j["warnings"] = m.warnings;
  return j;
}

}  // namespace infolens
