#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "infolens/pipeline.hpp"
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

// Gaussian S on a rows x cols x dims grid, trials spread over the five grid viewpoints.
TrialSet synthetic(int n, FeatureGrid grid, std::mt19937_64& rng) {
  TrialSet ts;
  ts.grid = grid;
  ts.S = oracle::gaussian_matrix(n, grid.n_columns(), rng);
  for (int i = 0; i < n; ++i) {
    ts.identity.push_back(0);
    ts.viewpoint.push_back(kExtrinsicGridDeg[static_cast<std::size_t>(i % 5)]);
    ts.replicate.push_back(i / 5);
  }
  return ts;
}

Vector gaussian_vector(Eigen::Index n, std::mt19937_64& rng) { return oracle::gaussian_matrix(n, 1, rng).col(0); }

}  // namespace

TEST(DiagnosticMap, PlantedFeaturesDominateTopDecile) {
  std::mt19937_64 rng(1);
  TrialSet ts = synthetic(600, {8, 8, 1}, rng);
  const std::vector<Eigen::Index> planted{9, 10, 17, 18, 41, 42};
  ts.R = 0.5 * gaussian_vector(600, rng);
  for (auto f : planted) ts.R += ts.S.col(f);
  Vector mask = Vector::Zero(64);
  for (auto f : planted) mask[f] = 1.0;
  MapOptions opt;
  opt.n_permutations = 100;
  opt.seed = 3;
  const FeatureMap m = diagnostic_map(ts, opt);
  EXPECT_EQ(m.kind, MapKind::diagnostic);
  EXPECT_GE(top_decile_in_mask(m.values, mask), 0.8);
  ASSERT_TRUE(m.threshold.has_value());
  for (auto f : planted) EXPECT_GT(m.values[f], *m.threshold);
  EXPECT_TRUE(m.warnings.empty());
}

TEST(DiagnosticMap, IndependentDecisionRarelyExceedsThreshold) {
  int any = 0;
  const int runs = 40;
  for (int run = 0; run < runs; ++run) {
    std::mt19937_64 rng(1000 + run);
    TrialSet ts = synthetic(200, {4, 4, 1}, rng);
    ts.R = gaussian_vector(200, rng);
    MapOptions opt;
    opt.n_permutations = 100;
    opt.seed = static_cast<std::uint64_t>(run);
    const FeatureMap m = diagnostic_map(ts, opt);
    any += m.thresholded().cwiseAbs().maxCoeff() > 0.0 ? 1 : 0;
    EXPECT_FALSE(m.warnings.empty());
  }
  EXPECT_LE(any, 2 * runs / 20 + 1);
}

TEST(DiagnosticMap, MultivariateFeaturesGroupTriplets) {
  std::mt19937_64 rng(2);
  TrialSet ts = synthetic(500, {2, 2, 3}, rng);
  ts.R = ts.S.col(6) - ts.S.col(7) + ts.S.col(8) + gaussian_vector(500, rng);
  const FeatureMap m = diagnostic_map(ts);
  ASSERT_EQ(m.values.size(), 4);
  Eigen::Index arg = 0;
  m.values.maxCoeff(&arg);
  EXPECT_EQ(arg, 2);
  // Regrouping a univariate grid into triplets.
  TrialSet flat = ts;
  flat.grid = {1, 12, 1};
  MapOptions opt;
  opt.feature_dims = 3;
  EXPECT_TRUE(diagnostic_map(flat, opt).values.isApprox(m.values, 1e-12));
  opt.feature_dims = 5;
  EXPECT_EQ(code_of([&] { diagnostic_map(flat, opt); }), ErrorCode::invalid_geometry);
}

TEST(DiagnosticMap, MissingDecisionAndMisalignedRows) {
  std::mt19937_64 rng(3);
  TrialSet ts = synthetic(50, {2, 2, 1}, rng);
  EXPECT_EQ(code_of([&] { diagnostic_map(ts); }), ErrorCode::missing_input);
  ts.R = gaussian_vector(49, rng);
  EXPECT_EQ(code_of([&] { diagnostic_map(ts); }), ErrorCode::invalid_data);
  ts.R = gaussian_vector(50, rng);
  ts.grid = {3, 3, 1};
  EXPECT_EQ(code_of([&] { diagnostic_map(ts); }), ErrorCode::invalid_geometry);
}

TEST(DiagnosticMap, SameSeedSameMap) {
  std::mt19937_64 rng(4);
  TrialSet ts = synthetic(200, {3, 3, 1}, rng);
  ts.R = ts.S.col(0) + gaussian_vector(200, rng);
  MapOptions opt;
  opt.n_permutations = 100;
  opt.seed = 9;
  const FeatureMap a = diagnostic_map(ts, opt), b = diagnostic_map(ts, opt);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.threshold, b.threshold);
}

namespace {

// Layer activations whose first PC follows feature 0 and whose second follows feature 3.
TrialSet with_layer(int n, std::mt19937_64& rng) {
  TrialSet ts = synthetic(n, {2, 3, 1}, rng);
  Matrix l = 0.05 * oracle::gaussian_matrix(n, 10, rng);
  l.col(0) += 3.0 * ts.S.col(0);
  l.col(1) += 1.5 * ts.S.col(3);
  ts.L["pool"] = l;
  return ts;
}

}  // namespace

TEST(LayerPcMaps, CountsOrderAndContent) {
  std::mt19937_64 rng(5);
  TrialSet ts = with_layer(500, rng);
  const PcaModel pca = layer_pca(ts, "pool", 6, 1);
  const auto pooled = layer_pc_maps(ts, pca);
  ASSERT_EQ(pooled.size(), 6u);
  Eigen::Index arg = 0;
  pooled[0].values.maxCoeff(&arg);
  EXPECT_EQ(arg, 0);
  pooled[1].values.maxCoeff(&arg);
  EXPECT_EQ(arg, 3);
  const auto per_vp = layer_pc_maps(ts, pca, 6, true);
  ASSERT_EQ(per_vp.size(), 30u);
  for (std::size_t i = 0; i < per_vp.size(); ++i) {
    EXPECT_EQ(per_vp[i].pc_index, static_cast<int>(i % 6));
    EXPECT_EQ(per_vp[i].viewpoint, kExtrinsicGridDeg[i / 6]);
    EXPECT_EQ(per_vp[i].kind, MapKind::layer_pc);
  }
  EXPECT_EQ(code_of([&] { layer_pca(ts, "missing", 6, 1); }), ErrorCode::missing_input);
  EXPECT_EQ(code_of([&] { layer_pc_maps(ts, pca, 7); }), ErrorCode::invalid_rank);
}

TEST(LayerPcMaps, ShuffledScoresCollapseBelowThreshold) {
  std::mt19937_64 rng(6);
  TrialSet ts = with_layer(500, rng);
  PcaModel pca = layer_pca(ts, "pool", 2, 1);
  for (int vp : kExtrinsicGridDeg) {
    auto rows = ts.rows_where_viewpoint(vp);
    auto shuffled = rows;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const Matrix before = pca.scores;
    for (std::size_t i = 0; i < rows.size(); ++i) pca.scores.row(rows[i]) = before.row(shuffled[i]);
  }
  MapOptions opt;
  opt.n_permutations = 100;
  opt.seed = 2;
  int supra = 0;
  for (const auto& m : layer_pc_maps(ts, pca, 2, false, opt)) supra += (m.thresholded().array() > 0.0).count();
  EXPECT_LE(supra, 1);
}

TEST(RedundancyMaps, BoundedByLayerMapsWhenUncorrected) {
  std::mt19937_64 rng(7);
  TrialSet ts = with_layer(600, rng);
  ts.R = ts.S.col(0) + ts.S.col(1) + 0.5 * gaussian_vector(600, rng);
  const PcaModel pca = layer_pca(ts, "pool", 3, 4);
  MapOptions opt;
  opt.bias_correct = false;
  for (bool per_vp : {false, true}) {
    const auto layer = layer_pc_maps(ts, pca, 3, per_vp, opt);
    const auto red = decision_redundancy_maps(ts, pca, 3, per_vp, opt);
    ASSERT_EQ(layer.size(), red.size());
    for (std::size_t i = 0; i < red.size(); ++i) {
      EXPECT_EQ(red[i].kind, MapKind::redundancy);
      EXPECT_TRUE(((red[i].values - layer[i].values).array() <= 1e-6).all()) << "map " << i;
    }
  }
  // Feature 0 drives PC 1 and R, so it dominates the first redundancy map.
  const auto red = decision_redundancy_maps(ts, pca, 3);
  Eigen::Index arg = 0;
  red[0].values.maxCoeff(&arg);
  EXPECT_EQ(arg, 0);
  // Feature 3 drives PC 2 but not R.
  EXPECT_LT(std::abs(red[1].values[3]), 0.02);
}

TEST(RedundancyMaps, IndependentDecisionGivesNearZero) {
  std::mt19937_64 rng(8);
  TrialSet ts = with_layer(2000, rng);
  ts.R = gaussian_vector(2000, rng);
  const PcaModel pca = layer_pca(ts, "pool", 2, 4);
  for (const auto& m : decision_redundancy_maps(ts, pca, 2)) EXPECT_LT(m.values.cwiseAbs().maxCoeff(), 0.01);
}

TEST(Consistency, IdenticalIndependentAndConstantMaps) {
  std::mt19937_64 rng(9);
  FeatureMap a;
  a.values = gaussian_vector(3000, rng);
  std::vector<FeatureMap> same{a, a, a};
  const auto c = viewpoint_consistency(same);
  EXPECT_NEAR(c.min_correlation, 1.0, 1e-12);
  EXPECT_TRUE(c.correlation.isApprox(Matrix::Ones(3, 3), 1e-12));
  FeatureMap b;
  b.values = gaussian_vector(3000, rng);
  EXPECT_LT(std::abs(viewpoint_consistency(std::vector<FeatureMap>{a, b}).min_correlation), 0.1);
  FeatureMap flat;
  flat.values = Vector::Constant(3000, 0.2);
  EXPECT_EQ(code_of([&] { viewpoint_consistency(std::vector<FeatureMap>{a, flat}); }), ErrorCode::degenerate_map);
  EXPECT_EQ(code_of([&] { viewpoint_consistency(std::vector<FeatureMap>{a}); }), ErrorCode::empty_set);
}

TEST(RdmPipeline, ViewpointCodedAndConstantSignatures) {
  std::mt19937_64 rng(10);
  TrialSet ts = synthetic(250, {1, 2, 1}, rng);
  const Matrix centres = 3.0 * oracle::gaussian_matrix(5, 12, rng);
  Matrix coded(250, 12), constant(250, 12);
  for (int i = 0; i < 250; ++i) {
    coded.row(i) = centres.row(i % 5) + 0.3 * oracle::gaussian_matrix(1, 12, rng);
    constant.row(i) = oracle::gaussian_matrix(1, 12, rng);
  }
  ts.L["coded"] = coded;
  ts.L["constant"] = constant;
  const RdmResult rc = rdm_pipeline(ts, "coded", 6, 1);
  EXPECT_LT(rc.rdm.within_block_mean / rc.rdm.between_block_mean, 0.5);
  const RdmResult rf = rdm_pipeline(ts, "constant", 6, 1);
  const double ratio = rf.rdm.within_block_mean / rf.rdm.between_block_mean;
  EXPECT_GE(ratio, 0.9);
  EXPECT_LE(ratio, 1.1);
  // Rows ordered by viewpoint, then replicate.
  for (std::size_t i = 1; i < rc.rows.size(); ++i) {
    const auto a = static_cast<std::size_t>(rc.rows[i - 1]), b = static_cast<std::size_t>(rc.rows[i]);
    EXPECT_TRUE(ts.viewpoint[a] < ts.viewpoint[b] ||
                (ts.viewpoint[a] == ts.viewpoint[b] && ts.replicate[a] < ts.replicate[b]));
  }
  const RdmResult capped = rdm_pipeline(ts, "coded", 6, 1, 10);
  EXPECT_EQ(capped.rows.size(), 50u);
  EXPECT_EQ(capped.rdm.dissimilarity.rows(), 50);
}

TEST(Robustness, ZeroProportionMatchesCleanAccuracy) {
  const GenerativeModel model = build_generative_model(GeneratorConfig::desk(), 5);
  const auto ids = sample_population(model, 3, 1.0, 6);
  const NetSpec spec = NetSpec::desk(3);
  const Params params = init_params(spec, 7);
  const std::vector<double> proportions{0.0, 0.8};
  const RobustnessReport r = noise_robustness_test(spec, params, model, ids[1], Channel::texture, proportions, 10, 8);
  Matrix clean(10, model.render.n_pixels());
  for (int t = 0; t < 10; ++t) {
    StimulusSpec s;
    s.identity = ids[1];
    s.extrinsics.viewpoint_deg = kExtrinsicGridDeg[static_cast<std::size_t>(t % 5)];
    clean.row(t) = render_stimulus(s, model).pixels.transpose();
  }
  EXPECT_DOUBLE_EQ(r.accuracy[0], evaluate(spec, params, clean, 1).accuracy);
  EXPECT_EQ(r.accepted.size(), 2u);
  EXPECT_EQ(r.accepted[1].size(), 10u);
  const std::vector<double> bad{-1.0};
  EXPECT_EQ(code_of([&] { noise_robustness_test(spec, params, model, ids[1], Channel::texture, bad, 10, 8); }),
            ErrorCode::invalid_scale);
}

TEST(PlantedScoring, TopDecileAndMaskedMean) {
  Vector values(20), mask = Vector::Zero(20);
  for (int i = 0; i < 20; ++i) values[i] = i;
  mask[19] = 1.0;
  EXPECT_DOUBLE_EQ(top_decile_in_mask(values, mask), 0.5);
  mask[18] = 1.0;
  EXPECT_DOUBLE_EQ(top_decile_in_mask(values, mask), 1.0);
  EXPECT_DOUBLE_EQ(masked_mean(values, mask), 18.5);
  EXPECT_TRUE(std::isnan(masked_mean(values, Vector::Zero(20))));
  EXPECT_EQ(code_of([&] { top_decile_in_mask(values, Vector::Zero(3)); }), ErrorCode::invalid_geometry);
}
