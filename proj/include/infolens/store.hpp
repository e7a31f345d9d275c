#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "infolens/config.hpp"
#include "infolens/error.hpp"
#include "infolens/io.hpp"
#include "infolens/network.hpp"
#include "infolens/trialset.hpp"

namespace infolens {

inline constexpr std::string_view kManifestName = "manifest.json";
inline constexpr std::string_view kManifestFormat = "infolens-manifest/1";

struct ManifestFile {
  std::string path;  // relative to the run directory
  std::string role;  // S | L | R | map | rdm | params | labels | report | svg | ...
  Eigen::Index rows = -1;  // -1 for non-matrix files
  Eigen::Index cols = -1;
  std::string checksum;    // fnv1a64 of the file bytes, hex
};

inline Json to_json(const ManifestFile& f) {
  Json j{{"path", f.path}, {"role", f.role}, {"fnv1a64", f.checksum}};
  if (f.rows >= 0) j["shape"] = {f.rows, f.cols};
  return j;
}

/**
 * A fresh output directory. Files are written into a hidden staging directory and
 * recorded in creation order; commit() writes the manifest and renames the staging
 * directory into place. An uncommitted run is removed, leaving no partial output.
 */
class RunDir {
 public:
  RunDir(fs::path root, std::string subcommand, Json config, Json seeds)
      : root_(std::move(root)), subcommand_(std::move(subcommand)), config_(std::move(config)),
        seeds_(std::move(seeds)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) fail(ErrorCode::io_failure, "cannot create run root " + root_.string());
    staging_ = root_ / (".staging-" + subcommand_ + "-" + std::to_string(::getpid()));
    fs::remove_all(staging_, ec);
    if (!fs::create_directory(staging_, ec) || ec) fail(ErrorCode::io_failure, "cannot create " + staging_.string());
  }

  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  ~RunDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  const fs::path& staging() const { return staging_; }

  void add_input(const std::string& role, const fs::path& dir) {
    inputs_.push_back(Json{{"role", role},
                           {"path", fs::absolute(dir).lexically_normal().string()},
                           {"manifest_fnv1a64", file_checksum(dir / kManifestName)}});
  }

  void write_matrix(const std::string& rel, const Matrix& m, const std::string& role) {
    const fs::path p = prepare(rel);
    infolens::write_matrix(p, m);
    files_.push_back(ManifestFile{rel, role, m.rows(), m.cols(), file_checksum(p)});
  }

  void write_text(const std::string& rel, std::string_view text, const std::string& role) {
    const fs::path p = prepare(rel);
    write_text_atomic(p, text);
    files_.push_back(ManifestFile{rel, role, -1, -1, file_checksum(p)});
  }

  void write_json(const std::string& rel, const Json& j, const std::string& role) {
    write_text(rel, j.dump(2) + "\n", role);
  }

  void set_summary(Json summary) { summary_ = std::move(summary); }

  Json manifest() const {
    Json files = Json::array();
    for (const auto& f : files_) files.push_back(to_json(f));
    Json m{{"format", kManifestFormat},
           {"subcommand", subcommand_},
           {"config", config_},
           {"seeds", seeds_},
           {"inputs", inputs_},
           {"files", files}};
    if (!summary_.is_null()) m["summary"] = summary_;
    m["run_id"] = hex64(fnv1a64(m.dump()));
    return m;
  }

  /// Writes the manifest and moves the run to root/<subcommand>-<run id>[-k]; returns the final path.
  fs::path commit() {
    const Json m = manifest();
    write_text_atomic(staging_ / kManifestName, m.dump(2) + "\n");
    const std::string base = subcommand_ + "-" + m["run_id"].get<std::string>().substr(0, 12);
    fs::path target = root_ / base;
    for (int k = 2; fs::exists(target); ++k) target = root_ / (base + "-" + std::to_string(k));
    std::error_code ec;
    fs::rename(staging_, target, ec);
    if (ec) fail(ErrorCode::io_failure, "cannot move run into " + target.string());
    committed_ = true;
    return target;
  }

 private:
  fs::path prepare(const std::string& rel) {
    const fs::path p = staging_ / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) fail(ErrorCode::io_failure, "cannot create " + p.parent_path().string());
    return p;
  }

  fs::path root_;
  fs::path staging_;
  std::string subcommand_;
  Json config_;
  Json seeds_;
  Json inputs_ = Json::array();
  std::vector<ManifestFile> files_;
  Json summary_;
  bool committed_ = false;
};

inline Json read_json(const fs::path& path) {
  const Bytes bytes = read_bytes(path);
  try {
    return Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::parse_error& e) {
    fail(ErrorCode::schema_violation, path.string() + ": " + e.what());
  }
}

/// A committed run directory; the manifest is checked against the files on load.
struct RunRecord {
  fs::path dir;
  Json manifest;

  static RunRecord open(const fs::path& dir, std::string_view expected_subcommand = {}) {
    const fs::path mpath = dir / kManifestName;
    if (!fs::exists(mpath)) fail(ErrorCode::missing_input, "no manifest in " + dir.string());
    RunRecord rec{dir, read_json(mpath)};
    const Json& m = rec.manifest;
    if (!m.is_object() || m.value("format", "") != kManifestFormat || !m.contains("files") ||
        !m["files"].is_array() || !m.contains("config"))
      fail(ErrorCode::schema_violation, mpath.string() + " is not an infolens manifest");
    if (!expected_subcommand.empty() && m.value("subcommand", "") != expected_subcommand && m.value("subcommand", "") != "pipeline")
      fail(ErrorCode::missing_input, dir.string() + " holds a '" + m.value("subcommand", "") + "' run, expected '" +
                                         std::string(expected_subcommand) + "'");
    for (const auto& f : m["files"]) {
      const fs::path p = dir / f.at("path").get<std::string>();
      if (!fs::exists(p)) fail(ErrorCode::missing_input, "manifest lists missing file " + p.string());
      if (file_checksum(p) != f.at("fnv1a64").get<std::string>())
        fail(ErrorCode::corrupt_file, p.string() + " does not match its manifest checksum");
    }
    return rec;
  }

  RunConfig config() const { return RunConfig::from_json(manifest.at("config")); }

  bool has(const std::string& rel) const {
    for (const auto& f : manifest["files"])
      if (f.at("path") == rel) return true;
    return false;
  }

  fs::path require(const std::string& rel) const {
    if (!has(rel)) fail(ErrorCode::missing_input, dir.string() + " has no " + rel);
    return dir / rel;
  }

  Matrix matrix(const std::string& rel) const { return read_matrix(require(rel)); }

  /// The committed run recorded as input `role`; its manifest must still match the recorded checksum.
  RunRecord input(const std::string& role, std::string_view expected_subcommand) const {
    for (const auto& in : manifest.value("inputs", Json::array()))
      if (in.value("role", "") == role) {
        const fs::path d = in.at("path").get<std::string>();
        if (!fs::exists(d / kManifestName)) fail(ErrorCode::missing_input, "input run " + d.string() + " is gone");
        if (file_checksum(d / kManifestName) != in.at("manifest_fnv1a64").get<std::string>())
          fail(ErrorCode::corrupt_file, "input run " + d.string() + " changed since it was used");
        return open(d, expected_subcommand);
      }
    fail(ErrorCode::missing_input, dir.string() + " records no '" + role + "' input");
  }
};

// ---- Trial sets ------------------------------------------------------------

/// Writes S, labels and (coefficient space) images under trials/, with the layout in trials/meta.json.
inline void save_trials(RunDir& run, const TrialSet& ts) {
  ts.check_aligned();
  run.write_matrix("trials/S.imat", ts.S, "S");
  if (ts.images.size() > 0) run.write_matrix("trials/images.imat", ts.images, "images");
  run.write_matrix("trials/identity.imat", as_column(ts.identity), "labels");
  run.write_matrix("trials/viewpoint.imat", as_column(ts.viewpoint), "labels");
  run.write_matrix("trials/replicate.imat", as_column(ts.replicate), "labels");
  run.write_json("trials/meta.json",
                 Json{{"space", std::string(to_string(ts.space))},
                      {"channel", std::string(to_string(ts.channel))},
                      {"grid", {{"rows", ts.grid.rows}, {"cols", ts.grid.cols}, {"dims", ts.grid.dims}}},
                      {"image", {{"height", ts.image_height}, {"width", ts.image_width}}}},
                 "meta");
}

inline TrialSet load_trials(const RunRecord& run) {
  const Json meta = read_json(run.require("trials/meta.json"));
  TrialSet ts;
  try {
    ts.space = parse_feature_space(meta.at("space").get<std::string>());
    ts.channel = parse_channel(meta.at("channel").get<std::string>());
    const Json& g = meta.at("grid");
    ts.grid = FeatureGrid{g.at("rows").get<int>(), g.at("cols").get<int>(), g.at("dims").get<int>()};
    ts.image_height = meta.at("image").at("height").get<int>();
    ts.image_width = meta.at("image").at("width").get<int>();
  } catch (const Json::exception& e) {
    fail(ErrorCode::schema_violation, "trials/meta.json: " + std::string(e.what()));
  }
  ts.S = run.matrix("trials/S.imat");
  if (ts.S.cols() != ts.grid.n_columns()) fail(ErrorCode::corrupt_file, "S does not match the recorded grid");
  if (run.has("trials/images.imat")) ts.images = run.matrix("trials/images.imat");
  ts.identity = to_ints(run.matrix("trials/identity.imat"));
  ts.viewpoint = to_ints(run.matrix("trials/viewpoint.imat"));
  ts.replicate = to_ints(run.matrix("trials/replicate.imat"));
  ts.check_aligned();
  return ts;
}

// ---- Params ----------------------------------------------------------------

/// One IMAT file per tensor under params/, plus params/header.json (spec, seed, epoch, tensor list).
inline void save_params(RunDir& run, const NetSpec& spec, const Params& params, int epoch) {
  Json tensors = Json::array();
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& layer = params.layers[li];
    for (std::size_t k = 0; k < layer.weights.size(); ++k) {
      const std::string rel = "params/layer" + std::to_string(li) + "_w" + std::to_string(k) + ".imat";
      run.write_matrix(rel, layer.weights[k], "params");
      tensors.push_back(Json{{"layer", li}, {"kind", "weight"}, {"index", k}, {"file", rel}});
    }
    for (std::size_t k = 0; k < layer.biases.size(); ++k) {
      const std::string rel = "params/layer" + std::to_string(li) + "_b" + std::to_string(k) + ".imat";
      run.write_matrix(rel, Matrix(layer.biases[k]), "params");
      tensors.push_back(Json{{"layer", li}, {"kind", "bias"}, {"index", k}, {"file", rel}});
    }
  }
  run.write_json("params/header.json",
                 Json{{"netspec", to_json(spec)}, {"seed", params.seed}, {"epoch", epoch}, {"tensors", tensors}},
                 "params");
}

inline std::pair<NetSpec, Params> load_params(const RunRecord& run) {
  const Json header = read_json(run.require("params/header.json"));
  if (!header.is_object() || !header.contains("netspec") || !header.contains("tensors"))
    fail(ErrorCode::schema_violation, "params header is incomplete");
  NetSpec spec = netspec_from_json(header["netspec"]);
  Params params = zero_params(spec);
  params.seed = header.value("seed", std::uint64_t{0});
  std::size_t expected = 0;
  for (const auto& l : params.layers) expected += l.weights.size() + l.biases.size();
  if (header["tensors"].size() != expected)
    fail(ErrorCode::corrupt_file, "params header lists " + std::to_string(header["tensors"].size()) +
                                      " tensors, spec needs " + std::to_string(expected));
  for (const auto& t : header["tensors"]) {
    const auto li = t.at("layer").get<std::size_t>();
    const auto k = t.at("index").get<std::size_t>();
    const bool weight = t.at("kind") == "weight";
    if (li >= params.layers.size()) fail(ErrorCode::corrupt_file, "tensor layer index out of range");
    auto& layer = params.layers[li];
    if (k >= (weight ? layer.weights.size() : layer.biases.size()))
      fail(ErrorCode::corrupt_file, "tensor index out of range");
    const Matrix m = run.matrix(t.at("file").get<std::string>());
    if (weight) {
      if (m.rows() != layer.weights[k].rows() || m.cols() != layer.weights[k].cols())
        fail(ErrorCode::corrupt_file, "weight shape does not match the spec");
      layer.weights[k] = m;
    } else {
      if (m.rows() != layer.biases[k].size() || m.cols() != 1)
        fail(ErrorCode::corrupt_file, "bias shape does not match the spec");
      layer.biases[k] = m.col(0);
    }
  }
  if (!params.all_finite()) fail(ErrorCode::invalid_data, "params contain non-finite values");
  return {std::move(spec), std::move(params)};
}

}  // namespace infolens
