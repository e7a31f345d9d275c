#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infolens/error.hpp"
#include "infolens/linalg.hpp"
#include "infolens/random.hpp"
#include "infolens/trialset.hpp"

namespace infolens {

// ---------------------------------------------------------------------------
// Categorical design

struct Factor {
  std::string name;
  int levels = 2;
};

/// Treatment coding with explicit intercept; optional pairwise interactions.
struct FactorSpec {
  std::vector<Factor> factors;
  bool include_interactions = true;

  void validate() const {
    if (factors.empty()) fail(ErrorCode::invalid_config, "factor spec has no factors");
    for (const auto& f : factors)
      if (f.levels < 2) fail(ErrorCode::invalid_config, "factor '" + f.name + "' needs at least 2 levels");
  }

  int n_columns() const {
    int cols = 1;
    for (const auto& f : factors) cols += f.levels - 1;
    if (include_interactions)
      for (std::size_t a = 0; a < factors.size(); ++a)
        for (std::size_t b = a + 1; b < factors.size(); ++b) cols += (factors[a].levels - 1) * (factors[b].levels - 1);
    return cols;
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names{"intercept"};
    for (const auto& f : factors)
      for (int l = 1; l < f.levels; ++l) names.push_back(f.name + "=" + std::to_string(l));
    if (include_interactions)
      for (std::size_t a = 0; a < factors.size(); ++a)
        for (std::size_t b = a + 1; b < factors.size(); ++b)
          for (int la = 1; la < factors[a].levels; ++la)
            for (int lb = 1; lb < factors[b].levels; ++lb)
              names.push_back(factors[a].name + "=" + std::to_string(la) + ":" + factors[b].name + "=" +
                              std::to_string(lb));
    return names;
  }

  /// Number of distinct level combinations.
  int n_cells() const {
    int cells = 1;
    for (const auto& f : factors) cells *= f.levels;
    return cells;
  }

  /// Level combination for a cell index, first factor varying slowest.
  std::vector<int> cell_levels(int cell) const {
    std::vector<int> levels(factors.size());
    for (std::size_t k = factors.size(); k-- > 0;) {
      levels[k] = cell % factors[k].levels;
      cell /= factors[k].levels;
    }
    return levels;
  }
};

using LevelRow = std::vector<int>;

inline void write_design_row(const LevelRow& levels, const FactorSpec& spec, Eigen::RowVectorXd& row) {
  if (levels.size() != spec.factors.size()) fail(ErrorCode::invalid_level, "level row has wrong number of factors");
  for (std::size_t k = 0; k < levels.size(); ++k)
    if (levels[k] < 0 || levels[k] >= spec.factors[k].levels)
      fail(ErrorCode::invalid_level, "level " + std::to_string(levels[k]) + " is invalid for factor '" +
                                         spec.factors[k].name + "'");
  row.setZero(spec.n_columns());
  Eigen::Index c = 0;
  row[c++] = 1.0;
  for (std::size_t k = 0; k < levels.size(); ++k) {
    if (levels[k] > 0) row[c + levels[k] - 1] = 1.0;
    c += spec.factors[k].levels - 1;
  }
  if (spec.include_interactions)
    for (std::size_t a = 0; a < levels.size(); ++a)
      for (std::size_t b = a + 1; b < levels.size(); ++b) {
        const int wb = spec.factors[b].levels - 1;
        if (levels[a] > 0 && levels[b] > 0) row[c + (levels[a] - 1) * wb + (levels[b] - 1)] = 1.0;
        c += (spec.factors[a].levels - 1) * wb;
      }
}

inline Matrix build_design_matrix(std::span<const LevelRow> rows, const FactorSpec& spec) {
  spec.validate();
  Matrix design(static_cast<Eigen::Index>(rows.size()), spec.n_columns());
  Eigen::RowVectorXd row(spec.n_columns());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    write_design_row(rows[i], spec, row);
    design.row(static_cast<Eigen::Index>(i)) = row;
  }
  return design;
}

struct GlmFit {
  Matrix coefficients;  // p x d
  Matrix residuals;     // n x d
};

/// Least-squares fit of every database column on the design (column-pivoted QR).
inline GlmFit fit_glm(const Matrix& database, const Matrix& design) {
  if (database.rows() != design.rows()) fail(ErrorCode::invalid_data, "database and design row counts differ");
  if (design.rows() < design.cols())
    fail(ErrorCode::rank_deficient_design, "fewer rows than design columns");
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  if (qr.rank() < design.cols())
    fail(ErrorCode::rank_deficient_design,
         "design rank " + std::to_string(qr.rank()) + " < " + std::to_string(design.cols()) + " columns");
  GlmFit fit;
  fit.coefficients = qr.solve(database);
  fit.residuals = database - design * fit.coefficients;
  return fit;
}

struct ResidualPca {
  Matrix components;       // n_pcs x d, orthonormal rows
  Vector singular_values;  // descending
  Matrix scores;           // n x n_pcs
  Vector mean;
  double tail_energy = 0.0;  // sum of squared singular values beyond n_pcs
};

/// Exact thin SVD of the column-centred residuals.
inline ResidualPca residual_pca(const Matrix& residuals, int n_pcs) {
  const Eigen::Index limit = std::min(residuals.rows(), residuals.cols());
  if (n_pcs < 1 || n_pcs > limit)
    fail(ErrorCode::invalid_rank, "n_pcs=" + std::to_string(n_pcs) + " outside [1, " + std::to_string(limit) + "]");
  ResidualPca out;
  out.mean = residuals.colwise().mean().transpose();
  const Matrix centered = residuals.rowwise() - out.mean.transpose();
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  Matrix v = svd.matrixV().leftCols(n_pcs);
  for (Eigen::Index c = 0; c < n_pcs; ++c) {
    Eigen::Index arg = 0;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0.0) v.col(c) = -v.col(c);
  }
  out.components = v.transpose();
  out.singular_values = svd.singularValues().head(n_pcs);
  out.scores = centered * v;
  out.tail_energy = svd.singularValues().tail(limit - n_pcs).squaredNorm();
  return out;
}

// ---------------------------------------------------------------------------
// Identity model

struct RenderConfig {
  int height = 32;
  int width = 32;
  int mesh = 6;          // shape control points per side
  int texture_grid = 4;  // texture regions per side
  double illumination_gain = 0.3;

  int shape_dims() const { return 2 * mesh * mesh; }
  int texture_dims() const { return texture_grid * texture_grid; }
  int n_pixels() const { return height * width; }
};

struct GlmIdentityModel {
  Channel channel = Channel::shape;
  FactorSpec design_coding;
  Matrix coefficients;         // n_design_cols x n_coeff_dims
  Matrix residual_components;  // n_pcs x n_coeff_dims
  Vector residual_singular_values;
  Eigen::Index n_database_rows = 0;

  Eigen::Index n_pcs() const { return residual_components.rows(); }
  Eigen::Index n_dims() const { return coefficients.cols(); }

  /// Categorical average for a level combination.
  Vector categorical_mean(const LevelRow& levels) const {
    Eigen::RowVectorXd row(coefficients.rows());
    write_design_row(levels, design_coding, row);
    return (row * coefficients).transpose();
  }

  Vector coefficient_vector(const LevelRow& levels, const Vector& residual_coeffs) const {
    return categorical_mean(levels) + residual_components.transpose() * residual_coeffs;
  }
};

/// Fits one channel: GLM on the categorical design, then PCA of the residuals.
inline GlmIdentityModel fit_identity_model(Channel channel, const FactorSpec& spec, std::span<const LevelRow> levels,
                                           const Matrix& database, int n_pcs) {
  const Matrix design = build_design_matrix(levels, spec);
  const GlmFit fit = fit_glm(database, design);
  const ResidualPca pca = residual_pca(fit.residuals, n_pcs);
  GlmIdentityModel model;
  model.channel = channel;
  model.design_coding = spec;
  model.coefficients = fit.coefficients;
  model.residual_components = pca.components;
  model.residual_singular_values = pca.singular_values;
  model.n_database_rows = database.rows();
  return model;
}

struct Identity {
  LevelRow factor_levels;
  Vector shape_residual;
  Vector texture_residual;
  int id_label = 0;

  bool operator==(const Identity& o) const {
    return factor_levels == o.factor_levels && id_label == o.id_label && shape_residual == o.shape_residual &&
           texture_residual == o.texture_residual;
  }
};

struct PopulationStd {
  Vector shape;    // per residual coefficient
  Vector texture;
};

struct GenerativeModel {
  GlmIdentityModel shape;
  GlmIdentityModel texture;
  PopulationStd population_std;
  RenderConfig render;

  Vector shape_coefficients(const Identity& id) const {
    return shape.coefficient_vector(id.factor_levels, id.shape_residual);
  }
  Vector texture_coefficients(const Identity& id) const {
    return texture.coefficient_vector(id.factor_levels, id.texture_residual);
  }
};

namespace detail {

inline Vector sample_residual(const GlmIdentityModel& m, double sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double n = static_cast<double>(m.n_database_rows);
  Vector out(m.n_pcs());
  for (Eigen::Index k = 0; k < out.size(); ++k) out[k] = sigma * m.residual_singular_values[k] / std::sqrt(n) * normal(rng);
  return out;
}

}  // namespace detail

/**
 * Random identity in a factor cell: residual coefficients drawn from
 * N(0, sigma^2 * s_k^2 / n) per residual PC and channel.
 */
inline Identity sample_identity(const GenerativeModel& model, const LevelRow& levels, double residual_sigma,
                                std::uint64_t seed, int id_label = 0) {
  if (residual_sigma < 0.0) fail(ErrorCode::invalid_scale, "residual_sigma must be >= 0");
  Eigen::RowVectorXd probe(model.shape.coefficients.rows());
  write_design_row(levels, model.shape.design_coding, probe);
  Rng rng(seed);
  Identity id;
  id.factor_levels = levels;
  id.shape_residual = detail::sample_residual(model.shape, residual_sigma, rng);
  id.texture_residual = detail::sample_residual(model.texture, residual_sigma, rng);
  id.id_label = id_label;
  return id;
}

inline LevelRow random_levels(const FactorSpec& spec, Rng& rng) {
  LevelRow levels;
  for (const auto& f : spec.factors) levels.push_back(std::uniform_int_distribution<int>(0, f.levels - 1)(rng));
  return levels;
}

/// Identities with unique labels 0..count-1 and uniformly random factor cells.
inline std::vector<Identity> sample_population(const GenerativeModel& model, int count, double residual_sigma,
                                               std::uint64_t seed) {
  Rng level_rng(derive_seed(seed, "levels"));
  std::vector<Identity> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const LevelRow levels = random_levels(model.shape.design_coding, level_rng);
    out.push_back(sample_identity(model, levels, residual_sigma, derive_seed(seed, static_cast<std::uint64_t>(i)), i));
  }
  return out;
}

inline PopulationStd population_std(std::span<const Identity> identities) {
  if (identities.size() < 2) fail(ErrorCode::insufficient_samples, "population std needs at least 2 identities");
  auto column_std = [&](auto get) {
    const Eigen::Index d = get(identities[0]).size();
    Matrix m(static_cast<Eigen::Index>(identities.size()), d);
    for (std::size_t i = 0; i < identities.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = get(identities[i]).transpose();
    const Matrix c = m.rowwise() - m.colwise().mean();
    return Vector((c.colwise().squaredNorm() / static_cast<double>(m.rows() - 1)).cwiseSqrt().transpose());
  };
  return PopulationStd{column_std([](const Identity& i) { return i.shape_residual; }),
                       column_std([](const Identity& i) { return i.texture_residual; })};
}

enum class NoiseReference { population_std, coefficient_magnitude };

struct NoiseSpec {
  Channel channel = Channel::texture;
  double proportion = 0.8;  // std multiplier
  std::uint64_t seed = 0;
  NoiseReference reference = NoiseReference::population_std;
};

namespace detail {

inline void add_noise(Vector& coeffs, const Vector& reference_std, double proportion, NoiseReference ref, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index k = 0; k < coeffs.size(); ++k) {
    const double base = ref == NoiseReference::population_std ? reference_std[k] : std::abs(coeffs[k]);
    coeffs[k] += proportion * base * normal(rng);
  }
}

}  // namespace detail

/**
 * Diagonal-covariance Gaussian noise on the residual coefficients of the selected
 * channel, std_k = proportion * population_std_k (or * |coeff_k|). A zero
 * proportion is a no-op.
 */
inline Identity inject_noise(const Identity& identity, const NoiseSpec& noise, const PopulationStd& pop) {
  if (noise.proportion < 0.0 || !std::isfinite(noise.proportion))
    fail(ErrorCode::invalid_scale, "noise proportion must be finite and >= 0");
  auto check = [](const Vector& s, const Vector& coeffs, std::string_view name) {
    if (s.size() != coeffs.size())
      fail(ErrorCode::invalid_scale, std::string(name) + " population std has wrong length");
    if ((s.array() <= 0.0).any() || !s.allFinite())
      fail(ErrorCode::invalid_scale, std::string(name) + " population std must be strictly positive");
  };
  const bool do_shape = noise.channel != Channel::texture;
  const bool do_texture = noise.channel != Channel::shape;
  if (do_shape) check(pop.shape, identity.shape_residual, "shape");
  if (do_texture) check(pop.texture, identity.texture_residual, "texture");

  Identity out = identity;
  if (noise.proportion == 0.0) return out;
  Rng rng(noise.seed);
  if (do_shape) detail::add_noise(out.shape_residual, pop.shape, noise.proportion, noise.reference, rng);
  if (do_texture) detail::add_noise(out.texture_residual, pop.texture, noise.proportion, noise.reference, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Database synthesis and model construction

struct GeneratorConfig {
  FactorSpec factors{{{"sex", 2}, {"age", 3}, {"ethnicity", 2}}, true};
  int rows_per_cell = 20;
  double shape_effect_std = 0.015;
  double shape_residual_std = 0.02;
  double shape_jitter_std = 0.002;
  double texture_effect_std = 0.05;
  double texture_residual_std = 0.12;
  int shape_pcs = 16;
  int texture_pcs = 16;
  int population_size = 500;
  double residual_sigma = 1.0;
  RenderConfig render;

  static GeneratorConfig desk() { return GeneratorConfig{}; }

  /// 2 sexes x 2 ethnicities x 3 ages x 7 expressions.
  static GeneratorConfig paper() {
    GeneratorConfig cfg;
    cfg.factors = FactorSpec{{{"sex", 2}, {"ethnicity", 2}, {"age", 3}, {"expression", 7}}, true};
    cfg.rows_per_cell = 4;
    return cfg;
  }
};

struct CoefficientDatabase {
  std::vector<LevelRow> levels;
  Matrix shape;    // n x shape_dims
  Matrix texture;  // n x texture_dims
};

namespace detail {

// Low-frequency displacement field on the control mesh, interleaved (dx, dy) per point.
inline Vector smooth_field(int mesh, double std_dev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector out = Vector::Zero(2 * mesh * mesh);
  for (int axis = 0; axis < 2; ++axis)
    for (int fx = 0; fx < 3; ++fx)
      for (int fy = 0; fy < 3; ++fy) {
        const double w = std_dev * normal(rng) / (1.0 + fx + fy);
        for (int j = 0; j < mesh; ++j)
          for (int i = 0; i < mesh; ++i) {
            const double bx = std::cos(std::numbers::pi * fx * (i + 0.5) / mesh);
            const double by = std::cos(std::numbers::pi * fy * (j + 0.5) / mesh);
            out[2 * (j * mesh + i) + axis] += w * bx * by;
          }
      }
  return out;
}

}  // namespace detail

/// Balanced synthetic coefficient database: planted categorical effects plus identity residuals.
inline CoefficientDatabase synthesize_database(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.factors.validate();
  const int cols = cfg.factors.n_columns();
  const int mesh = cfg.render.mesh;
  const int sd = cfg.render.shape_dims();
  const int td = cfg.render.texture_dims();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix b_shape = Matrix::Zero(cols, sd);
  Matrix b_texture = Matrix::Zero(cols, td);
  for (int c = 1; c < cols; ++c) {
    b_shape.row(c) = detail::smooth_field(mesh, cfg.shape_effect_std, rng).transpose();
    for (int k = 0; k < td; ++k) b_texture(c, k) = cfg.texture_effect_std * normal(rng);
  }

  CoefficientDatabase db;
  const int n = cfg.factors.n_cells() * cfg.rows_per_cell;
  db.shape.resize(n, sd);
  db.texture.resize(n, td);
  Eigen::RowVectorXd row(cols);
  int r = 0;
  for (int cell = 0; cell < cfg.factors.n_cells(); ++cell) {
    const LevelRow levels = cfg.factors.cell_levels(cell);
    write_design_row(levels, cfg.factors, row);
    for (int rep = 0; rep < cfg.rows_per_cell; ++rep, ++r) {
      db.levels.push_back(levels);
      Vector shape_res = detail::smooth_field(mesh, cfg.shape_residual_std, rng);
      for (int k = 0; k < sd; ++k) shape_res[k] += cfg.shape_jitter_std * normal(rng);
      db.shape.row(r) = row * b_shape + shape_res.transpose();
      for (int k = 0; k < td; ++k) db.texture(r, k) = (row * b_texture.col(k))(0) + cfg.texture_residual_std * normal(rng);
    }
  }
  return db;
}

/// Database synthesis, per-channel GLM + residual PCA, and population std from sampled identities.
inline GenerativeModel build_generative_model(const GeneratorConfig& cfg, std::uint64_t seed) {
  const CoefficientDatabase db = synthesize_database(cfg, derive_seed(seed, "database"));
  GenerativeModel model;
  model.render = cfg.render;
  model.shape = fit_identity_model(Channel::shape, cfg.factors, db.levels, db.shape, cfg.shape_pcs);
  model.texture = fit_identity_model(Channel::texture, cfg.factors, db.levels, db.texture, cfg.texture_pcs);
  const auto population = sample_population(model, cfg.population_size, cfg.residual_sigma, derive_seed(seed, "population"));
  model.population_std = population_std(population);
  return model;
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr std::array<int, 5> kExtrinsicGridDeg{-30, -15, 0, 15, 30};

struct Extrinsics {
  double viewpoint_deg = 0.0;
  double illumination_deg = 0.0;
  double scale = 1.0;
  double translate_x = 0.0;  // fraction of image width
  double translate_y = 0.0;  // fraction of image height
};

struct StimulusSpec {
  Identity identity;
  Extrinsics extrinsics;
  std::optional<NoiseSpec> noise;
};

struct RenderedStimulus {
  int height = 0;
  int width = 0;
  Vector pixels;  // row-major, index y * width + x, values in [0, 1]
  StimulusSpec spec;

  FeatureGrid feature_grid() const { return FeatureGrid{height, width, 1}; }
};

inline bool on_extrinsic_grid(double deg) {
  return std::any_of(kExtrinsicGridDeg.begin(), kExtrinsicGridDeg.end(),
                     [&](int g) { return std::abs(deg - g) < 1e-9; });
}

inline void validate_extrinsics(const Extrinsics& e) {
  if (!on_extrinsic_grid(e.viewpoint_deg))
    fail(ErrorCode::invalid_spec, "viewpoint " + std::to_string(e.viewpoint_deg) + " is not on the -30..30 grid");
  if (!on_extrinsic_grid(e.illumination_deg))
    fail(ErrorCode::invalid_spec, "illumination " + std::to_string(e.illumination_deg) + " is not on the -30..30 grid");
  if (!(e.scale >= 1.0 && e.scale <= 2.0)) fail(ErrorCode::invalid_spec, "scale outside [1, 2]");
  if (!(std::abs(e.translate_x) <= 0.3 && std::abs(e.translate_y) <= 0.3))
    fail(ErrorCode::invalid_spec, "translation magnitude outside [0, 0.3]");
}

namespace detail {

inline bool inside_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double u = (x - cx) / rx;
  const double v = (y - cy) / ry;
  return u * u + v * v <= 1.0;
}

}  // namespace detail

/// Face-like template intensity in centred canonical coordinates ([-0.5, 0.5]^2), mirror-symmetric in x.
inline double template_intensity(double x, double y) {
  const double ax = std::abs(x);
  if (detail::inside_ellipse(ax, y, 0.16, -0.10, 0.07, 0.035)) return 0.25;  // eyes
  if (detail::inside_ellipse(ax, y, 0.16, -0.18, 0.08, 0.015)) return 0.35;  // brows
  if (detail::inside_ellipse(x, y, 0.0, 0.22, 0.13, 0.03)) return 0.30;      // mouth
  if (ax <= 0.025 && y >= -0.05 && y <= 0.10) return 0.50;                   // nose
  if (detail::inside_ellipse(x, y, 0.0, 0.02, 0.40, 0.46)) return 0.60;      // face
  return 0.20;
}

inline int texture_region(double x, double y, int grid) {
  const int cx = std::clamp(static_cast<int>(std::floor((x + 0.5) * grid)), 0, grid - 1);
  const int cy = std::clamp(static_cast<int>(std::floor((y + 0.5) * grid)), 0, grid - 1);
  return cy * grid + cx;
}

/// Bilinear interpolation of control-point displacements at a centred canonical point.
inline std::array<double, 2> mesh_displacement(const Vector& shape, int mesh, double x, double y) {
  const double cells = mesh - 1;
  const double gx = std::clamp((x + 0.5) * cells, 0.0, cells);
  const double gy = std::clamp((y + 0.5) * cells, 0.0, cells);
  const int i0 = std::min(static_cast<int>(gx), mesh - 2);
  const int j0 = std::min(static_cast<int>(gy), mesh - 2);
  const double tx = gx - i0;
  const double ty = gy - j0;
  std::array<double, 2> out{0.0, 0.0};
  for (int dj = 0; dj < 2; ++dj)
    for (int di = 0; di < 2; ++di) {
      const double w = (di ? tx : 1.0 - tx) * (dj ? ty : 1.0 - ty);
      if (w == 0.0) continue;
      const int idx = (j0 + dj) * mesh + (i0 + di);
      out[0] += w * shape[2 * idx];
      out[1] += w * shape[2 * idx + 1];
    }
  return out;
}

/**
 * Renders coefficient vectors to an H x W grid. Per output pixel, in order of
 * inverse mapping: undo scale / translation, illumination gain from the
 * illumination angle, undo the cylindrical yaw of the viewpoint, undo the
 * control-mesh displacement, then template + region texture offset. Clamped to [0, 1].
 */
namespace detail {

struct SourcePoint {
  double x = 0.0;  // canonical template coordinates after undoing extrinsics and mesh displacement
  double y = 0.0;
  double gain = 1.0;
};

// Inverse map from output pixel (x, y) to the canonical face, or nullopt outside the face.
inline std::optional<SourcePoint> source_point(int x, int y, const Vector& shape, const Extrinsics& ext,
                                               const RenderConfig& cfg) {
  const double theta = ext.viewpoint_deg * std::numbers::pi / 180.0;
  const double light = std::sin(ext.illumination_deg * std::numbers::pi / 180.0) * cfg.illumination_gain;
  const double px = (x + 0.5) / cfg.width - 0.5;
  const double py = (y + 0.5) / cfg.height - 0.5;
  const double qx = (px - ext.translate_x) / ext.scale;
  const double qy = (py - ext.translate_y) / ext.scale;
  if (std::abs(qx) > 0.5 || std::abs(qy) > 0.5) return std::nullopt;
  const double a = qx / 0.5;
  double ux = qx;
  if (theta != 0.0) {
    const double phi = std::asin(std::clamp(a, -1.0, 1.0)) - theta;
    if (std::abs(phi) > std::numbers::pi / 2) return std::nullopt;
    ux = 0.5 * std::sin(phi);
  }
  const auto disp = mesh_displacement(shape, cfg.mesh, ux, qy);
  return SourcePoint{ux - disp[0], qy - disp[1], 1.0 + light * a};
}

inline void check_coefficients(const Vector& shape, const Vector& texture, const RenderConfig& cfg) {
  if (shape.size() != cfg.shape_dims() || texture.size() != cfg.texture_dims())
    fail(ErrorCode::invalid_spec, "coefficient vectors do not match the render configuration");
}

}  // namespace detail

inline Vector render_coefficients(const Vector& shape, const Vector& texture, const Extrinsics& ext,
                                  const RenderConfig& cfg) {
  detail::check_coefficients(shape, texture, cfg);
  Vector pixels(cfg.n_pixels());
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      double value = 0.0;
      if (const auto src = detail::source_point(x, y, shape, ext, cfg))
        value = src->gain * (template_intensity(src->x, src->y) + texture[texture_region(src->x, src->y, cfg.texture_grid)]);
      pixels[y * cfg.width + x] = std::clamp(value, 0.0, 1.0);
    }
  return pixels;
}

/// 1 where the rendered pixel samples one of the given texture regions, else 0.
inline Vector texture_region_mask(const Vector& shape, std::span<const int> regions, const Extrinsics& ext,
                                  const RenderConfig& cfg) {
  detail::check_coefficients(shape, Vector::Zero(cfg.texture_dims()), cfg);
  Vector mask = Vector::Zero(cfg.n_pixels());
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      if (const auto src = detail::source_point(x, y, shape, ext, cfg)) {
        const int r = texture_region(src->x, src->y, cfg.texture_grid);
        if (std::find(regions.begin(), regions.end(), r) != regions.end()) mask[y * cfg.width + x] = 1.0;
      }
  return mask;
}

/// Noise (if any) is applied to the identity before rendering.
inline RenderedStimulus render_stimulus(const StimulusSpec& spec, const GenerativeModel& model) {
  validate_extrinsics(spec.extrinsics);
  const Identity id = spec.noise ? inject_noise(spec.identity, *spec.noise, model.population_std) : spec.identity;
  RenderedStimulus out;
  out.height = model.render.height;
  out.width = model.render.width;
  out.pixels = render_coefficients(model.shape_coefficients(id), model.texture_coefficients(id), spec.extrinsics,
                                   model.render);
  out.spec = spec;
  return out;
}

/// Geometric resample of a rendered image (bilinear, zero outside), matching the scale/translation convention of the renderer.
inline Vector scale_translate(const Vector& image, int height, int width, double scale, double tx, double ty) {
  Vector out(image.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double px = (x + 0.5) / width - 0.5;
      const double py = (y + 0.5) / height - 0.5;
      const double sx = ((px - tx) / scale + 0.5) * width - 0.5;
      const double sy = ((py - ty) / scale + 0.5) * height - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      double v = 0.0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int xi = x0 + dx;
          const int yi = y0 + dy;
          if (xi < 0 || yi < 0 || xi >= width || yi >= height) continue;
          v += (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * image[yi * width + xi];
        }
      out[y * width + x] = v;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Trial generation

struct TrialSetOptions {
  FeatureSpace space = FeatureSpace::pixel;
  double illumination_deg = 0.0;
};

/**
 * Noisy trials ordered (identity, viewpoint, replicate). Trial t uses noise seed
 * derive_seed(noise.seed, t), so rows are independent of generation order.
 */
inline TrialSet generate_trialset(std::span<const Identity> identities, std::span<const int> viewpoints,
                                  int n_noisy_per_cell, const NoiseSpec& noise, const GenerativeModel& model,
                                  const TrialSetOptions& options = {}) {
  if (identities.empty()) fail(ErrorCode::invalid_config, "identity list is empty");
  if (viewpoints.empty() || n_noisy_per_cell < 1) fail(ErrorCode::invalid_config, "counts must be >= 1");
  const RenderConfig& rc = model.render;
  const Eigen::Index n = static_cast<Eigen::Index>(identities.size() * viewpoints.size()) * n_noisy_per_cell;

  TrialSet ts;
  ts.space = options.space;
  ts.channel = noise.channel;
  ts.image_height = rc.height;
  ts.image_width = rc.width;
  if (options.space == FeatureSpace::pixel) {
    ts.grid = FeatureGrid{rc.height, rc.width, 1};
  } else if (noise.channel == Channel::shape) {
    ts.grid = FeatureGrid{rc.mesh, rc.mesh, 2};
  } else if (noise.channel == Channel::texture) {
    ts.grid = FeatureGrid{rc.texture_grid, rc.texture_grid, 1};
  } else {
    fail(ErrorCode::invalid_config, "coefficient-space features need a single noise channel");
  }
  ts.S.resize(n, ts.grid.n_columns());
  if (options.space == FeatureSpace::coefficient) ts.images.resize(n, rc.n_pixels());
  ts.coefficients.resize(n, rc.shape_dims() + rc.texture_dims());

  Eigen::Index t = 0;
  for (const Identity& id : identities)
    for (int vp : viewpoints)
      for (int rep = 0; rep < n_noisy_per_cell; ++rep, ++t) {
        NoiseSpec trial_noise = noise;
        trial_noise.seed = derive_seed(noise.seed, static_cast<std::uint64_t>(t));
        const Identity noisy = inject_noise(id, trial_noise, model.population_std);
        const Vector shape = model.shape_coefficients(noisy);
        const Vector texture = model.texture_coefficients(noisy);
        Extrinsics ext;
        ext.viewpoint_deg = vp;
        ext.illumination_deg = options.illumination_deg;
        validate_extrinsics(ext);
        const Vector pixels = render_coefficients(shape, texture, ext, rc);
        ts.coefficients.row(t) << shape.transpose(), texture.transpose();
        if (options.space == FeatureSpace::pixel) {
          ts.S.row(t) = pixels.transpose();
        } else {
          ts.images.row(t) = pixels.transpose();
          ts.S.row(t) = (noise.channel == Channel::shape ? shape : texture).transpose();
        }
        ts.identity.push_back(id.id_label);
        ts.viewpoint.push_back(vp);
        ts.replicate.push_back(rep);
      }
  return ts;
}

/// Identity-defining texture regions and nuisance settings for a planted-dependence training set.
struct PlantedTask {
  std::vector<int> decision_regions{5, 6, 9, 10};
  std::vector<int> unused_regions{13, 14};
  double code_amplitude = 0.15;  // texture offset per code step in the decision regions
  int code_min_distance = 2;     // minimum Hamming distance between identity codes
  double nuisance_sigma = 1.0;   // residual_sigma of the per-render nuisance draw
  bool randomize_shape = false;  // true: shape from the nuisance draw instead of the identity
  bool randomize_illumination = true;
};

/// Codes over {-1, 0, +1}^regions in lexicographic order, kept greedily when at least
/// min_distance away (Hamming) from every code already kept.
inline std::vector<std::vector<int>> planted_codes(int count, int regions, int min_distance) {
  std::vector<std::vector<int>> out;
  int total = 1;
  for (int r = 0; r < regions; ++r) total *= 3;
  for (int c = 0; c < total && static_cast<int>(out.size()) < count; ++c) {
    std::vector<int> code(static_cast<std::size_t>(regions));
    for (int r = regions, v = c; r-- > 0; v /= 3) code[static_cast<std::size_t>(r)] = v % 3 - 1;
    const bool far = std::all_of(out.begin(), out.end(), [&](const std::vector<int>& o) {
      int d = 0;
      for (std::size_t k = 0; k < code.size(); ++k) d += o[k] != code[k] ? 1 : 0;
      return d >= min_distance;
    });
    if (far) out.push_back(std::move(code));
  }
  if (static_cast<int>(out.size()) < count)
    fail(ErrorCode::invalid_config, "only " + std::to_string(out.size()) + " codes at distance " +
                                        std::to_string(min_distance) + " over " + std::to_string(regions) + " regions");
  return out;
}

/**
 * Identities for the planted task. All share one factor cell and a zero shape
 * residual; identity i's texture equals the cell mean plus code_amplitude times its
 * code in the decision regions, and the cell mean elsewhere. Labels are 0..count-1.
 */
inline std::vector<Identity> planted_identities(const GenerativeModel& model, int count, const PlantedTask& task) {
  if (count < 2) fail(ErrorCode::invalid_config, "planted task needs at least 2 identities");
  if (!(task.code_amplitude > 0.0)) fail(ErrorCode::invalid_scale, "code_amplitude must be > 0");
  const Eigen::Index dims = model.texture.n_dims();
  if (model.texture.n_pcs() != dims)
    fail(ErrorCode::invalid_config, "planted codes need a full-rank texture residual basis");
  for (int r : task.decision_regions)
    if (r < 0 || r >= dims) fail(ErrorCode::invalid_config, "decision region out of range");
  const auto codes = planted_codes(count, static_cast<int>(task.decision_regions.size()), task.code_min_distance);
  const LevelRow levels(model.shape.design_coding.factors.size(), 0);
  std::vector<Identity> out;
  for (int i = 0; i < count; ++i) {
    Identity id = sample_identity(model, levels, 0.0, 0, i);
    Vector offset = Vector::Zero(dims);
    for (std::size_t k = 0; k < task.decision_regions.size(); ++k)
      offset[task.decision_regions[k]] = task.code_amplitude * codes[static_cast<std::size_t>(i)][k];
    id.texture_residual = model.texture.residual_components * offset;
    out.push_back(std::move(id));
  }
  return out;
}

struct LabelledImages {
  Matrix images;  // n x (H*W)
  std::vector<int> labels;
  std::vector<int> viewpoints;
};

/**
 * Training renders where only the decision regions carry identity: every other
 * texture region (and, optionally, shape) comes from a fresh random identity per
 * render. Renders cycle through the viewpoint grid.
 */
inline LabelledImages generate_planted_images(const GenerativeModel& model, std::span<const Identity> identities,
                                              const PlantedTask& task, int renders_per_identity, std::uint64_t seed) {
  if (identities.empty() || renders_per_identity < 1) fail(ErrorCode::invalid_config, "empty planted request");
  const RenderConfig& rc = model.render;
  for (int r : task.decision_regions)
    if (r < 0 || r >= rc.texture_dims()) fail(ErrorCode::invalid_config, "decision region out of range");
  LabelledImages out;
  out.images.resize(static_cast<Eigen::Index>(identities.size()) * renders_per_identity, rc.n_pixels());
  Rng rng(seed);
  Eigen::Index row = 0;
  for (const Identity& id : identities) {
    const Vector id_texture = model.texture_coefficients(id);
    const Vector id_shape = model.shape_coefficients(id);
    for (int k = 0; k < renders_per_identity; ++k, ++row) {
      const LevelRow levels = random_levels(model.shape.design_coding, rng);
      const Identity nuisance = sample_identity(model, levels, task.nuisance_sigma, rng());
      Vector texture = model.texture_coefficients(nuisance);
      for (int r : task.decision_regions) texture[r] = id_texture[r];
      const Vector shape = task.randomize_shape ? model.shape_coefficients(nuisance) : id_shape;
      Extrinsics ext;
      ext.viewpoint_deg = kExtrinsicGridDeg[static_cast<std::size_t>(k) % kExtrinsicGridDeg.size()];
      if (task.randomize_illumination)
        ext.illumination_deg = kExtrinsicGridDeg[std::uniform_int_distribution<std::size_t>(0, 4)(rng)];
      out.images.row(row) = render_coefficients(shape, texture, ext, rc).transpose();
      out.labels.push_back(id.id_label);
      out.viewpoints.push_back(static_cast<int>(ext.viewpoint_deg));
    }
  }
  return out;
}

}  // namespace infolens
