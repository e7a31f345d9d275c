#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "infolens/genmodel.hpp"
#include "oracles.hpp"

using namespace infolens;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::io_failure;
}

FactorSpec sex_age() { return FactorSpec{{{"sex", 2}, {"age", 3}}, true}; }

std::vector<LevelRow> balanced_rows(const FactorSpec& spec, int reps) {
  std::vector<LevelRow> rows;
  for (int c = 0; c < spec.n_cells(); ++c)
    for (int r = 0; r < reps; ++r) rows.push_back(spec.cell_levels(c));
  return rows;
}

const GenerativeModel& desk_model() {
  static const GenerativeModel m = build_generative_model(GeneratorConfig::desk(), 17);
  return m;
}

}  // namespace

TEST(Design, TreatmentCodingColumnCounts) {
  EXPECT_EQ(sex_age().n_columns(), 6);
  EXPECT_EQ((FactorSpec{{{"sex", 2}}, false}).n_columns(), 2);
  const auto rows = balanced_rows(sex_age(), 2);
  const Matrix d = build_design_matrix(rows, sex_age());
  EXPECT_EQ(d.rows(), 12);
  EXPECT_EQ(Eigen::JacobiSVD<Matrix>(d).rank(), 6);
}

TEST(Design, InvalidLevelRejected) {
  const std::vector<LevelRow> rows{{0, 3}};
  EXPECT_EQ(code_of([&] { build_design_matrix(rows, sex_age()); }), ErrorCode::invalid_level);
  const std::vector<LevelRow> short_row{{0}};
  EXPECT_EQ(code_of([&] { build_design_matrix(short_row, sex_age()); }), ErrorCode::invalid_level);
}

TEST(Glm, ExactRecoveryWhenNoiseless) {
  std::mt19937_64 rng(3);
  const Matrix d = build_design_matrix(balanced_rows(sex_age(), 5), sex_age());
  const Matrix b0 = oracle::gaussian_matrix(6, 7, rng);
  const GlmFit fit = fit_glm(d * b0, d);
  EXPECT_LE((fit.coefficients - b0).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE(fit.residuals.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Glm, NoisyRecoveryMatchesNormalEquations) {
  std::mt19937_64 rng(4);
  const Matrix d = build_design_matrix(balanced_rows(sex_age(), 400 / 6 + 1), sex_age()).topRows(400);
  const Matrix b0 = oracle::gaussian_matrix(6, 10, rng);
  const Matrix x = d * b0 + 0.01 * oracle::gaussian_matrix(400, 10, rng);
  const GlmFit fit = fit_glm(x, d);
  EXPECT_LE((fit.coefficients - b0).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LE((fit.coefficients - oracle::normal_equations(d, x)).cwiseAbs().maxCoeff(), 1e-9);
  // Residuals are orthogonal to the design.
  EXPECT_LE((d.transpose() * fit.residuals).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Glm, DuplicatedColumnIsRankDeficient) {
  Matrix d = build_design_matrix(balanced_rows(sex_age(), 3), sex_age());
  Matrix dup(d.rows(), 7);
  dup << d, d.col(2);
  const Matrix x = Matrix::Ones(d.rows(), 2);
  EXPECT_EQ(code_of([&] { fit_glm(x, dup); }), ErrorCode::rank_deficient_design);
  EXPECT_EQ(code_of([&] { fit_glm(Matrix::Ones(3, 2), d.topRows(3)); }), ErrorCode::rank_deficient_design);
}

TEST(ResidualPcaTest, RankThreeHasVanishingTail) {
  std::mt19937_64 rng(5);
  const Matrix r = oracle::gaussian_matrix(40, 3, rng) * oracle::gaussian_matrix(3, 12, rng);
  const Matrix centred = r.rowwise() - r.colwise().mean();
  const ResidualPca p = residual_pca(centred, 5);
  EXPECT_LT(p.singular_values[3], 1e-10);
  EXPECT_LT(p.singular_values[4], 1e-10);
  EXPECT_GT(p.singular_values[2], 1e-3);
}

TEST(ResidualPcaTest, FullReconstructionAndExactSvd) {
  std::mt19937_64 rng(6);
  const Matrix r = oracle::gaussian_matrix(50, 20, rng);
  const ResidualPca p = residual_pca(r, 20);
  const Matrix rebuilt = (p.scores * p.components).rowwise() + p.mean.transpose();
  EXPECT_LE((rebuilt - r).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix centred = r.rowwise() - r.colwise().mean();
  const Vector exact = Eigen::JacobiSVD<Matrix>(centred).singularValues();
  EXPECT_LE((p.singular_values - exact).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(code_of([&] { residual_pca(r, 0); }), ErrorCode::invalid_rank);
  EXPECT_EQ(code_of([&] { residual_pca(r, 21); }), ErrorCode::invalid_rank);
}

TEST(Identities, ZeroSigmaGivesCellMean) {
  const auto& m = desk_model();
  const LevelRow levels{1, 2, 0};
  const Identity id = sample_identity(m, levels, 0.0, 99);
  EXPECT_EQ(m.shape_coefficients(id), m.shape.categorical_mean(levels));
  EXPECT_EQ(m.texture_coefficients(id), m.texture.categorical_mean(levels));
  EXPECT_EQ(code_of([&] { sample_identity(m, levels, -1.0, 0); }), ErrorCode::invalid_scale);
  EXPECT_EQ(code_of([&] { sample_identity(m, LevelRow{0, 5, 0}, 1.0, 0); }), ErrorCode::invalid_level);
}

TEST(Identities, SameSeedIsDeterministic) {
  const auto& m = desk_model();
  EXPECT_EQ(sample_identity(m, {0, 1, 1}, 1.0, 5), sample_identity(m, {0, 1, 1}, 1.0, 5));
  EXPECT_FALSE(sample_identity(m, {0, 1, 1}, 1.0, 5) == sample_identity(m, {0, 1, 1}, 1.0, 6));
}

TEST(Identities, PopulationStdMatchesTarget) {
  const auto& m = desk_model();
  const auto pop = sample_population(m, 500, 1.0, 2024);
  const PopulationStd s = population_std(pop);
  const double n = static_cast<double>(m.shape.n_database_rows);
  for (Eigen::Index k = 0; k < s.shape.size(); ++k)
    EXPECT_NEAR(s.shape[k] / (m.shape.residual_singular_values[k] / std::sqrt(n)), 1.0, 0.1) << "shape pc " << k;
  for (Eigen::Index k = 0; k < s.texture.size(); ++k)
    EXPECT_NEAR(s.texture[k] / (m.texture.residual_singular_values[k] / std::sqrt(n)), 1.0, 0.1) << "texture pc " << k;
}

TEST(Noise, StdScalesWithProportionAndReference) {
  const Identity base{{0}, Vector::Zero(2), Vector::Zero(2), 0};
  PopulationStd pop{Vector(2), Vector(2)};
  pop.shape << 1.0, 2.0;
  pop.texture << 1.0, 2.0;
  for (double proportion : {0.8, 4.0}) {
    const int n = 20000;
    Matrix draws(n, 2);
    for (int i = 0; i < n; ++i)
      draws.row(i) = inject_noise(base, {Channel::shape, proportion, static_cast<std::uint64_t>(i)}, pop)
                         .shape_residual.transpose();
    const Matrix c = draws.rowwise() - draws.colwise().mean();
    const Eigen::RowVectorXd sd = (c.colwise().squaredNorm() / (n - 1)).cwiseSqrt();
    EXPECT_NEAR(sd[0] / proportion, 1.0, 0.02);
    EXPECT_NEAR(sd[1] / proportion, 2.0, 0.04);
  }
}

TEST(Noise, ChannelIsolationAndValidation) {
  const auto& m = desk_model();
  const Identity id = sample_identity(m, {0, 0, 0}, 1.0, 3);
  const Identity s = inject_noise(id, {Channel::shape, 0.8, 11}, m.population_std);
  EXPECT_EQ(s.texture_residual, id.texture_residual);
  EXPECT_NE(s.shape_residual, id.shape_residual);
  const Identity t = inject_noise(id, {Channel::texture, 0.8, 11}, m.population_std);
  EXPECT_EQ(t.shape_residual, id.shape_residual);
  EXPECT_EQ(inject_noise(id, {Channel::both, 0.0, 11}, m.population_std), id);
  EXPECT_EQ(code_of([&] { inject_noise(id, {Channel::shape, -0.1, 1}, m.population_std); }), ErrorCode::invalid_scale);
  PopulationStd bad = m.population_std;
  bad.shape[0] = 0.0;
  EXPECT_EQ(code_of([&] { inject_noise(id, {Channel::shape, 0.8, 1}, bad); }), ErrorCode::invalid_scale);
}

TEST(Render, TemplateIsStable) {
  const RenderConfig rc;
  const Vector zs = Vector::Zero(rc.shape_dims()), zt = Vector::Zero(rc.texture_dims());
  const Vector a = render_coefficients(zs, zt, {}, rc);
  EXPECT_EQ(a, render_coefficients(zs, zt, {}, rc));
  EXPECT_GE(a.minCoeff(), 0.0);
  EXPECT_LE(a.maxCoeff(), 1.0);
  std::set<double> levels(a.data(), a.data() + a.size());
  EXPECT_GE(levels.size(), 4u);
}

TEST(Render, OpposedViewpointsAreMirrorImages) {
  const RenderConfig rc;
  const Vector zs = Vector::Zero(rc.shape_dims()), zt = Vector::Zero(rc.texture_dims());
  for (double deg : {15.0, 30.0}) {
    Extrinsics left, right;
    left.viewpoint_deg = -deg;
    right.viewpoint_deg = deg;
    const Vector l = render_coefficients(zs, zt, left, rc);
    const Vector r = render_coefficients(zs, zt, right, rc);
    EXPECT_NE(l, render_coefficients(zs, zt, {}, rc));
    for (int y = 0; y < rc.height; ++y)
      for (int x = 0; x < rc.width; ++x)
        EXPECT_NEAR(l[y * rc.width + x], r[y * rc.width + (rc.width - 1 - x)], 1e-12) << x << "," << y;
  }
}

TEST(Render, ControlPointPerturbationIsLocal) {
  const RenderConfig rc;
  const Vector zt = Vector::Zero(rc.texture_dims());
  const Vector base = render_coefficients(Vector::Zero(rc.shape_dims()), zt, {}, rc);
  const double cells = rc.mesh - 1;
  int changed_total = 0;
  for (int j = 0; j < rc.mesh; ++j)
    for (int i = 0; i < rc.mesh; ++i)
      for (int axis = 0; axis < 2; ++axis) {
        Vector shape = Vector::Zero(rc.shape_dims());
        shape[2 * (j * rc.mesh + i) + axis] = 0.05;
        const Vector moved = render_coefficients(shape, zt, {}, rc);
        for (int y = 0; y < rc.height; ++y)
          for (int x = 0; x < rc.width; ++x) {
            if (moved[y * rc.width + x] == base[y * rc.width + x]) continue;
            ++changed_total;
            const double gx = (x + 0.5) / rc.width * cells;
            const double gy = (y + 0.5) / rc.height * cells;
            EXPECT_LT(std::abs(gx - i), 1.0) << "point " << i << "," << j << " pixel " << x << "," << y;
            EXPECT_LT(std::abs(gy - j), 1.0) << "point " << i << "," << j << " pixel " << x << "," << y;
          }
      }
  EXPECT_GT(changed_total, 0);
}

TEST(Render, TexturePerturbationMatchesRegionMask) {
  const auto& m = desk_model();
  const Identity id = sample_identity(m, {0, 0, 0}, 1.0, 8);
  const Vector shape = m.shape_coefficients(id);
  const Vector texture = Vector::Zero(m.render.texture_dims());
  const std::vector<int> regions{5, 10};
  for (int vp : kExtrinsicGridDeg) {
    Extrinsics e;
    e.viewpoint_deg = vp;
    Vector bumped = texture;
    for (int r : regions) bumped[r] = 0.1;
    const Vector diff = render_coefficients(shape, bumped, e, m.render) - render_coefficients(shape, texture, e, m.render);
    const Vector mask = texture_region_mask(shape, regions, e, m.render);
    EXPECT_GT(mask.sum(), 0.0);
    for (Eigen::Index p = 0; p < diff.size(); ++p) EXPECT_EQ(diff[p] != 0.0, mask[p] > 0.0) << "vp " << vp << " px " << p;
  }
}

TEST(Render, OffGridExtrinsicsRejected) {
  const auto& m = desk_model();
  StimulusSpec spec{sample_identity(m, {0, 0, 0}, 1.0, 1), {}, std::nullopt};
  spec.extrinsics.viewpoint_deg = 10;
  EXPECT_EQ(code_of([&] { render_stimulus(spec, m); }), ErrorCode::invalid_spec);
  spec.extrinsics.viewpoint_deg = 0;
  spec.extrinsics.scale = 2.5;
  EXPECT_EQ(code_of([&] { render_stimulus(spec, m); }), ErrorCode::invalid_spec);
}

TEST(TrialSets, CountsOrderingAndDeterminism) {
  const auto& m = desk_model();
  const auto ids = sample_population(m, 2, 1.0, 4);
  const std::vector<int> vps(kExtrinsicGridDeg.begin(), kExtrinsicGridDeg.end());
  const NoiseSpec noise{Channel::texture, 0.8, 21};
  const TrialSet ts = generate_trialset(ids, vps, 100, noise, m);
  EXPECT_EQ(ts.size(), 1000);
  for (int vp : vps) EXPECT_EQ(ts.rows_where_viewpoint(vp).size(), 200u);
  EXPECT_EQ(ts.S, generate_trialset(ids, vps, 100, noise, m).S);
  const TrialSet coeff = generate_trialset(ids, vps, 2, noise, m, {FeatureSpace::coefficient, 0.0});
  EXPECT_EQ(coeff.S.cols(), m.render.texture_dims());
  EXPECT_EQ(coeff.images.cols(), m.render.n_pixels());
}

TEST(Planted, CodesKeepMinimumDistance) {
  const auto codes = planted_codes(20, 4, 2);
  ASSERT_EQ(codes.size(), 20u);
  for (std::size_t a = 0; a < codes.size(); ++a)
    for (std::size_t b = a + 1; b < codes.size(); ++b) {
      int d = 0;
      for (std::size_t k = 0; k < 4; ++k) d += codes[a][k] != codes[b][k];
      EXPECT_GE(d, 2);
    }
  EXPECT_EQ(code_of([] { planted_codes(100, 2, 2); }), ErrorCode::invalid_config);
}

TEST(Planted, IdentitiesDifferOnlyInDecisionRegions) {
  const auto& m = desk_model();
  const PlantedTask task;
  const auto ids = planted_identities(m, 20, task);
  const Vector t0 = m.texture_coefficients(ids[0]);
  for (const auto& id : ids) {
    const Vector diff = m.texture_coefficients(id) - t0;
    for (Eigen::Index k = 0; k < diff.size(); ++k)
      if (std::find(task.decision_regions.begin(), task.decision_regions.end(), k) == task.decision_regions.end()) {
        EXPECT_NEAR(diff[k], 0.0, 1e-12);
      }
    EXPECT_EQ(m.shape_coefficients(id), m.shape_coefficients(ids[0]));
  }
  const LabelledImages li = generate_planted_images(m, ids, task, 10, 3);
  EXPECT_EQ(li.images.rows(), 200);
  EXPECT_EQ(li.labels[15], 1);
  EXPECT_EQ(li.viewpoints[2], 0);
}
