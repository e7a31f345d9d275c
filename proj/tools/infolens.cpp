// infolens command-line driver. Every subcommand writes a fresh run directory
// under $INFOLENS_RUNS (default ./runs) and prints its path as JSON on stdout.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "infolens/infolens.hpp"

namespace il = infolens;
using il::Json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitUnexpected = 1;

fs::path runs_root() {
  const char* env = std::getenv("INFOLENS_RUNS");
  return env && *env ? fs::path(env) : fs::path("runs");
}

void print_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << Json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
}

struct ConfigFlags {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;

  il::RunConfig load() const {
    il::RunConfig cfg = config_path.empty() ? il::RunConfig::from_preset(preset, 7)
                                            : il::RunConfig::from_json(il::read_json(config_path));
    if (seed) cfg.seed = *seed;
    cfg.validate();
    return cfg;
  }
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  auto* c = cmd->add_option("--config", f.config_path, "JSON run configuration");
  cmd->add_option("--preset", f.preset, "desk | paper")->excludes(c);
  cmd->add_option("--seed", f.seed, "global seed (overrides the config)");
}

il::RunRecord open_required(const std::string& dir, const std::string& flag, const std::string& sub,
                            std::string_view expected) {
  if (dir.empty()) il::fail(il::ErrorCode::missing_input, sub + " needs " + flag + " <run dir>");
  return il::RunRecord::open(dir, expected);
}

std::string viewpoint_tag(const std::optional<int>& vp) {
  if (!vp) return "pooled";
  return *vp < 0 ? "vp_m" + std::to_string(-*vp) : "vp" + std::to_string(*vp);
}

Json finish(il::RunDir& run) {
  const fs::path dir = run.commit();
  const Json m = il::read_json(dir / il::kManifestName);
  return Json{{"run_dir", dir.string()}, {"run_id", m["run_id"]}};
}

// ---- Map files -------------------------------------------------------------

/// maps/<kind>_<view>[_pc<k>].imat as grid rows x cols, indexed in maps/index.json.
class MapWriter {
 public:
  explicit MapWriter(il::RunDir& run) : run_(run) {}

  void add(const std::vector<il::FeatureMap>& maps) {
    for (const auto& m : maps) {
      std::string name = std::string(il::to_string(m.kind)) + "_" + viewpoint_tag(m.viewpoint);
      if (m.pc_index >= 0) name += "_pc" + std::to_string(m.pc_index + 1);
      il::Matrix grid(m.grid.rows, m.grid.cols);
      for (int r = 0; r < m.grid.rows; ++r)
        for (int c = 0; c < m.grid.cols; ++c) grid(r, c) = m.values[r * m.grid.cols + c];
      const std::string rel = "maps/" + name + ".imat";
      run_.write_matrix(rel, grid, "map");
      Json meta = il::map_metadata(m);
      meta["file"] = rel;
      meta["name"] = name;
      if (!m.degenerate.empty()) meta["degenerate_features"] = m.degenerate;
      index_.push_back(meta);
    }
  }

  void write_index() { run_.write_json("maps/index.json", index_, "map-index"); }

 private:
  il::RunDir& run_;
  Json index_ = Json::array();
};

std::vector<std::pair<std::string, il::FeatureMap>> read_maps(const il::RunRecord& rec) {
  const Json index = il::read_json(rec.require("maps/index.json"));
  std::vector<std::pair<std::string, il::FeatureMap>> out;
  try {
    for (const auto& e : index) {
      il::FeatureMap m;
      const std::string kind = e.at("kind");
      m.kind = kind == "diagnostic" ? il::MapKind::diagnostic
               : kind == "layer_pc" ? il::MapKind::layer_pc
                                    : il::MapKind::redundancy;
      m.grid = il::FeatureGrid{e.at("grid").at("rows"), e.at("grid").at("cols"), e.at("grid").at("dims")};
      if (!e.at("threshold").is_null()) m.threshold = e.at("threshold").get<double>();
      if (!e.at("pc").is_null()) m.pc_index = e.at("pc").get<int>() - 1;
      if (!e.at("viewpoint").is_null()) m.viewpoint = e.at("viewpoint").get<int>();
      const il::Matrix grid = rec.matrix(e.at("file"));
      if (grid.rows() != m.grid.rows || grid.cols() != m.grid.cols)
        il::fail(il::ErrorCode::invalid_geometry, "map file does not match its recorded grid");
      m.values.resize(grid.size());
      for (Eigen::Index r = 0; r < grid.rows(); ++r)
        for (Eigen::Index c = 0; c < grid.cols(); ++c) m.values[r * grid.cols() + c] = grid(r, c);
      out.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
  } catch (const Json::exception& e) {
    il::fail(il::ErrorCode::schema_violation, "maps/index.json: " + std::string(e.what()));
  }
  return out;
}

void write_svgs(il::RunDir& run, const std::vector<std::pair<std::string, il::FeatureMap>>& maps, il::Colormap cm) {
  for (const auto& [name, m] : maps) run.write_text("svg/" + name + ".svg", il::render_feature_map(m, cm), "svg");
}

std::vector<std::pair<std::string, il::FeatureMap>> named(const std::vector<il::FeatureMap>& maps) {
  std::vector<std::pair<std::string, il::FeatureMap>> out;
  for (const auto& m : maps) {
    std::string name = std::string(il::to_string(m.kind)) + "_" + viewpoint_tag(m.viewpoint);
    if (m.pc_index >= 0) name += "_pc" + std::to_string(m.pc_index + 1);
    out.emplace_back(name, m);
  }
  return out;
}

// ---- Reports ---------------------------------------------------------------

Json history_json(const il::TrainResult& r) {
  Json h = Json::array();
  for (const auto& e : r.history)
    h.push_back(Json{{"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"train_accuracy", e.train_accuracy},
                     {"test_loss", e.test_loss},
                     {"test_accuracy", e.test_accuracy}});
  return h;
}

Json robustness_json(const il::RobustnessReport& r) {
  return Json{{"channel", std::string(il::to_string(r.channel))},
              {"target_id", r.target_id},
              {"proportions", r.proportions},
              {"accuracy", r.accuracy}};
}

void write_pca(il::RunDir& run, const il::PcaModel& pca) {
  run.write_matrix("pca/components.imat", pca.components, "pca");
  run.write_matrix("pca/mean.imat", il::Matrix(pca.mean), "pca");
  run.write_matrix("pca/singular_values.imat", il::Matrix(pca.singular_values), "pca");
}

Json pca_json(const il::PcaModel& pca) {
  const il::Vector r = pca.explained_variance_ratio();
  const std::vector<double> ratio(r.data(), r.data() + r.size());
  return Json{{"k", pca.k()}, {"explained_variance_ratio", ratio}};
}

void write_rdm(il::RunDir& run, const il::RdmResult& r) {
  run.write_matrix("rdm/rdm.imat", r.rdm.dissimilarity, "rdm");
  run.write_matrix("rdm/viewpoint.imat", il::as_column(r.rdm.block_labels), "labels");
}

Json rdm_json(const il::RdmResult& r) {
  auto num = [](double x) { return std::isnan(x) ? Json(nullptr) : Json(x); };
  return Json{{"size", r.rdm.dissimilarity.rows()},
              {"within_block_mean", num(r.rdm.within_block_mean)},
              {"between_block_mean", num(r.rdm.between_block_mean)},
              {"within_between_ratio", num(r.rdm.within_between_ratio())}};
}

// ---- Shared loading --------------------------------------------------------

struct Captured {
  il::RunConfig cfg;
  il::TrialSet trials;
};

Captured load_captured(const il::RunRecord& capture) {
  const il::RunRecord gen = capture.input("gen", "gen");
  Captured c{capture.config(), il::load_trials(gen)};
  c.trials.L["pool"] = capture.matrix("trials/L_pool.imat");
  const il::Matrix r = capture.matrix("trials/R.imat");
  if (r.cols() != 1) il::fail(il::ErrorCode::corrupt_file, "R must be a single column");
  c.trials.R = r.col(0);
  c.trials.check_aligned();
  return c;
}

std::pair<il::NetSpec, il::Params> load_net(const il::RunRecord& train) { return il::load_params(train); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"infolens: information-theoretic probing of a face-identity network"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, pipe_flags;
  std::string train_gen, cap_train, eval_train, rob_train, map_capture, pc_capture, red_capture, rdm_capture, plot_run;
  std::string colormap = "sequential";
  std::vector<double> proportions;
  int rob_trials = 0;
  std::optional<std::uint64_t> rob_seed;
  bool pipe_svg = true;

  auto* gen = app.add_subcommand("gen", "build the generative model, training images and analysis trial set");
  add_config_flags(gen, gen_flags);
  auto* trn = app.add_subcommand("train", "train the network on a gen run's images");
  trn->add_option("--gen", train_gen, "gen run directory");
  auto* cap = app.add_subcommand("capture", "capture layer activations and decision values on the trial set");
  cap->add_option("--train", cap_train, "train run directory");
  auto* evl = app.add_subcommand("eval", "held-out and trial-set accuracy");
  evl->add_option("--train", eval_train, "train run directory");
  auto* mim = app.add_subcommand("mi-map", "diagnostic maps MI(S;R)");
  mim->add_option("--capture", map_capture, "capture run directory");
  auto* pcm = app.add_subcommand("pc-map", "layer PC maps MI(S;PC)");
  pcm->add_option("--capture", pc_capture, "capture run directory");
  auto* rdm = app.add_subcommand("red-map", "redundancy maps Red(S;PC;R)");
  rdm->add_option("--capture", red_capture, "capture run directory");
  auto* rsa = app.add_subcommand("rdm", "representational dissimilarity matrix of layer PCs");
  rsa->add_option("--capture", rdm_capture, "capture run directory");
  auto* rob = app.add_subcommand("robustness", "target accuracy under increasing noise");
  rob->add_option("--train", rob_train, "train run directory");
  rob->add_option("--proportions", proportions, "noise proportions, comma separated")->delimiter(',');
  rob->add_option("--trials", rob_trials, "trials per proportion")->check(CLI::PositiveNumber);
  rob->add_option("--seed", rob_seed, "noise seed (default: the config's robustness seed)");
  auto* plt = app.add_subcommand("plot", "render the maps of a run as SVG heatmaps");
  plt->add_option("--maps", plot_run, "run directory holding maps/index.json");
  plt->add_option("--colormap", colormap, "sequential | diverging");
  auto* pipe = app.add_subcommand("pipeline", "end-to-end planted-dependence run");
  add_config_flags(pipe, pipe_flags);
  pipe->add_flag("!--no-svg", pipe_svg, "skip SVG rendering");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), kExitUsage);
    return kExitUsage;
  }

  const fs::path root = runs_root();
  try {
    Json out;
    if (*gen) {
      const il::RunConfig cfg = gen_flags.load();
      const il::PlantedSetup s = il::build_planted(cfg);
      const il::TrialSet ts = il::analysis_trials(cfg, s);
      il::RunDir run(root, "gen", cfg.to_json(), cfg.seeds().to_json());
      run.write_matrix("train/images.imat", s.images.images, "images");
      run.write_matrix("train/labels.imat", il::as_column(s.images.labels), "labels");
      run.write_matrix("train/viewpoint.imat", il::as_column(s.images.viewpoints), "labels");
      il::save_trials(run, ts);
      run.set_summary(Json{{"train_images", s.images.images.rows()}, {"trials", ts.size()}});
      out = finish(run);
    } else if (*trn) {
      const il::RunRecord g = open_required(train_gen, "--gen", "train", "gen");
      const il::RunConfig cfg = g.config();
      const il::Matrix images = g.matrix("train/images.imat");
      const std::vector<int> labels = il::to_ints(g.matrix("train/labels.imat"));
      il::TrainConfig tc = cfg.train;
      tc.seed = cfg.seeds().train;
      const il::NetSpec spec = cfg.net_spec();
      const il::TrainResult res = il::train(spec, images, labels, tc);
      il::RunDir run(root, "train", cfg.to_json(), cfg.seeds().to_json());
      run.add_input("gen", g.dir);
      il::save_params(run, spec, res.params, static_cast<int>(res.history.size()));
      std::vector<int> test(res.test_rows.begin(), res.test_rows.end());
      run.write_matrix("train/test_rows.imat", il::as_column(test), "labels");
      run.write_json("train/history.json", history_json(res), "report");
      run.set_summary(Json{{"test_accuracy", res.history.back().test_accuracy}});
      out = finish(run);
    } else if (*cap) {
      const il::RunRecord t = open_required(cap_train, "--train", "capture", "train");
      const il::RunRecord g = t.input("gen", "gen");
      const il::RunConfig cfg = t.config();
      auto [spec, params] = load_net(t);
      il::TrialSet ts = il::load_trials(g);
      il::attach_network(ts, spec, params, cfg.analysis.target_id, cfg.analysis.decision_value);
      il::RunDir run(root, "capture", cfg.to_json(), cfg.seeds().to_json());
      run.add_input("gen", g.dir);
      run.add_input("train", t.dir);
      for (const auto& [name, m] : ts.L) run.write_matrix("trials/L_" + name + ".imat", m, "L");
      run.write_matrix("trials/R.imat", il::Matrix(ts.R), "R");
      out = finish(run);
    } else if (*evl) {
      const il::RunRecord t = open_required(eval_train, "--train", "eval", "train");
      const il::RunRecord g = t.input("gen", "gen");
      const il::RunConfig cfg = t.config();
      auto [spec, params] = load_net(t);
      const il::Matrix images = g.matrix("train/images.imat");
      const std::vector<int> labels = il::to_ints(g.matrix("train/labels.imat"));
      std::vector<Eigen::Index> rows;
      for (int r : il::to_ints(t.matrix("train/test_rows.imat"))) {
        if (r < 0 || r >= images.rows()) il::fail(il::ErrorCode::corrupt_file, "test row out of range");
        rows.push_back(r);
      }
      std::vector<int> test_labels;
      for (auto r : rows) test_labels.push_back(labels[static_cast<std::size_t>(r)]);
      const il::Matrix logits = il::forward(spec, params, il::detail::gather_rows(images, rows)).logits;
      const il::TrialSet ts = il::load_trials(g);
      const il::Evaluation ev = il::evaluate(spec, params, ts.pixels(), cfg.analysis.target_id);
      const Json report{{"held_out_accuracy", il::accuracy(logits, test_labels)},
                        {"held_out_images", rows.size()},
                        {"trial_set_target_accuracy", ev.accuracy},
                        {"trial_set_size", ts.size()}};
      il::RunDir run(root, "eval", cfg.to_json(), cfg.seeds().to_json());
      run.add_input("gen", g.dir);
      run.add_input("train", t.dir);
      run.write_json("eval.json", report, "report");
      run.set_summary(report);
      out = finish(run);
    } else if (*mim || *pcm || *rdm || *rsa) {
      const std::string sub = *mim ? "mi-map" : *pcm ? "pc-map" : *rdm ? "red-map" : "rdm";
      const std::string& dir = *mim ? map_capture : *pcm ? pc_capture : *rdm ? red_capture : rdm_capture;
      const il::RunRecord c = open_required(dir, "--capture", sub, "capture");
      const Captured in = load_captured(c);
      const auto& a = in.cfg.analysis;
      const il::MapOptions opt = in.cfg.map_options();
      il::RunDir run(root, sub, in.cfg.to_json(), in.cfg.seeds().to_json());
      run.add_input("capture", c.dir);
      Json summary;
      if (sub == "rdm") {
        const il::RdmResult r = il::rdm_pipeline(in.trials, "pool", a.n_pcs, in.cfg.seeds().pca, a.rdm_rows_per_viewpoint);
        write_rdm(run, r);
        summary = rdm_json(r);
      } else {
        MapWriter maps(run);
        std::vector<il::FeatureMap> result;
        if (sub == "mi-map") {
          result = il::diagnostic_maps(in.trials, a.per_viewpoint, opt);
        } else {
          const il::PcaModel pca = il::layer_pca(in.trials, "pool", a.n_pcs, in.cfg.seeds().pca);
          write_pca(run, pca);
          summary["pca"] = pca_json(pca);
          result = sub == "pc-map" ? il::layer_pc_maps(in.trials, pca, a.n_pcs, a.per_viewpoint, opt)
                                   : il::decision_redundancy_maps(in.trials, pca, a.n_pcs, a.per_viewpoint, opt);
        }
        maps.add(result);
        maps.write_index();
        summary["maps"] = result.size();
      }
      run.set_summary(summary);
      out = finish(run);
    } else if (*rob) {
      const il::RunRecord t = open_required(rob_train, "--train", "robustness", "train");
      il::RunConfig cfg = t.config();
      if (!proportions.empty()) cfg.analysis.robustness_proportions = proportions;
      if (rob_trials > 0) cfg.analysis.robustness_trials = rob_trials;
      cfg.validate();
      auto [spec, params] = load_net(t);
      const il::PlantedSetup s = il::build_planted(cfg);
      const std::uint64_t seed = rob_seed ? *rob_seed : cfg.seeds().robustness;
      const il::RobustnessReport r = il::noise_robustness_test(
          spec, params, s.model, s.identities[static_cast<std::size_t>(cfg.analysis.target_id)],
          cfg.analysis.noise_channel, cfg.analysis.robustness_proportions, cfg.analysis.robustness_trials, seed);
      Json seeds = cfg.seeds().to_json();
      seeds["robustness"] = seed;
      il::RunDir run(root, "robustness", cfg.to_json(), seeds);
      run.add_input("train", t.dir);
      run.write_json("robustness.json", robustness_json(r), "report");
      run.set_summary(robustness_json(r));
      out = finish(run);
    } else if (*plt) {
      const il::Colormap cm = il::parse_colormap(colormap);
      const il::RunRecord m = open_required(plot_run, "--maps", "plot", {});
      const auto maps = read_maps(m);
      il::RunDir run(root, "plot", m.manifest.at("config"), m.manifest.value("seeds", Json::object()));
      run.add_input("maps", m.dir);
      write_svgs(run, maps, cm);
      run.set_summary(Json{{"svgs", maps.size()}, {"colormap", colormap}});
      out = finish(run);
    } else if (*pipe) {
      const il::RunConfig cfg = pipe_flags.load();
      const il::PipelineResult r = il::run_pipeline(cfg);
      il::RunDir run(root, "pipeline", cfg.to_json(), cfg.seeds().to_json());
      il::save_params(run, r.spec, r.training.params, static_cast<int>(r.training.history.size()));
      run.write_json("train/history.json", history_json(r.training), "report");
      run.write_matrix("trials/L_pool.imat", r.trials.L.at("pool"), "L");
      run.write_matrix("trials/R.imat", il::Matrix(r.trials.R), "R");
      write_pca(run, r.pca);
      MapWriter maps(run);
      maps.add(r.diagnostic);
      maps.add(r.layer_pc);
      maps.add(r.redundancy);
      maps.write_index();
      write_rdm(run, r.rdm);
      run.write_json("robustness.json", robustness_json(r.robustness), "report");
      Json summary{{"test_accuracy", r.training.history.back().test_accuracy},
                   {"pca", pca_json(r.pca)},
                   {"rdm", rdm_json(r.rdm)},
                   {"robustness", robustness_json(r.robustness)}};
      if (cfg.analysis.noise_channel == il::Channel::texture) summary["planted"] = il::to_json(r.scores);
      if (r.consistency) summary["viewpoint_min_correlation"] = r.consistency->min_correlation;
      if (pipe_svg) {
        write_svgs(run, named(r.diagnostic), il::Colormap::sequential);
        write_svgs(run, named(r.layer_pc), il::Colormap::sequential);
        write_svgs(run, named(r.redundancy), il::Colormap::sequential);
      }
      run.write_json("report.json", summary, "report");
      run.set_summary(summary);
      out = finish(run);
    }
    std::cout << out.dump() << "\n";
    return 0;
  } catch (const il::Error& e) {
    const int code = il::exit_code(e.code());
    print_error(std::string(il::to_string(e.code())), e.message(), code);
    return code;
  } catch (const std::exception& e) {
    print_error("unexpected", e.what(), kExitUnexpected);
    return kExitUnexpected;
  }
}
