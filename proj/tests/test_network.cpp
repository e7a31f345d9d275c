#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "infolens/network.hpp"
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

// Every layer kind, small enough for exhaustive finite differences.
NetSpec all_kinds() {
  NetSpec s;
  s.input_height = 6;
  s.input_width = 6;
  s.n_classes = 3;
  s.input_mean = 0.2;
  s.input_std = 0.5;
  s.layers = {Conv3x3{1, 2, 2}, Relu{}, ResidualBlock{2}, Relu{}, Conv3x3{2, 3, 1}, Relu{},
              GlobalAvgPool{},  Dense{3, 4}, Relu{}, Logits{4, 3}};
  s.capture_points = {{"pool", 6}, {"hidden", 8}};
  return s;
}

Matrix random_inputs(Eigen::Index n, Eigen::Index pixels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return oracle::gaussian_matrix(n, pixels, rng);
}

double loss(const NetSpec& s, const Params& p, const Matrix& x, const std::vector<int>& y) {
  return cross_entropy(forward(s, p, x).logits, y);
}

}  // namespace

TEST(Forward, ZeroParamsGiveUniformLogits) {
  NetSpec s = NetSpec::desk(10);
  const Params p = zero_params(s);
  const Matrix x = random_inputs(4, 32 * 32, 1);
  const ForwardResult r = forward(s, p, x);
  EXPECT_EQ(r.logits.rows(), 4);
  EXPECT_NEAR(cross_entropy(r.logits, std::vector<int>{0, 3, 7, 9}), std::log(10.0), 1e-12);
}

TEST(Forward, ZeroedResidualBranchIsIdentity) {
  NetSpec s;
  s.input_height = 5;
  s.input_width = 5;
  s.n_classes = 2;
  s.layers = {Conv3x3{1, 3, 1}, ResidualBlock{3}, Logits{75, 2}};
  s.capture_points = {{"stem", 0}, {"block", 1}};
  Params p = init_params(s, 3);
  p.layers[1].weights[1].setZero();
  p.layers[1].biases[1].setZero();
  const ForwardResult r = forward(s, p, random_inputs(3, 25, 2), true);
  EXPECT_EQ(r.captures.at("stem"), r.captures.at("block"));
}

TEST(Forward, CaptureWidthAndValidation) {
  const NetSpec s = NetSpec::desk(5);
  const Params p = init_params(s, 1);
  const ForwardResult r = forward(s, p, random_inputs(7, 32 * 32, 3), true);
  EXPECT_EQ(r.captures.at("pool").rows(), 7);
  EXPECT_EQ(r.captures.at("pool").cols(), 32);
  EXPECT_EQ(code_of([&] { forward(s, p, random_inputs(2, 31 * 32, 3)); }), ErrorCode::invalid_input);
  NetSpec bad = s;
  bad.layers.pop_back();
  EXPECT_EQ(code_of([&] { bad.shapes(); }), ErrorCode::invalid_spec);
}

TEST(Forward, ChunkingDoesNotChangeResults) {
  const NetSpec s = NetSpec::desk(4);
  const Params p = init_params(s, 2);
  const Matrix x = random_inputs(9, 32 * 32, 4);
  EXPECT_TRUE(forward(s, p, x, true, 256).logits.isApprox(forward(s, p, x, true, 2).logits, 1e-12));
}

TEST(Backprop, CentralDifferencesForEveryLayerKind) {
  const NetSpec s = all_kinds();
  Params p = init_params(s, 5);
  // Non-zero biases so every bias gradient is exercised away from symmetric points.
  std::mt19937_64 rng(6);
  for (auto& l : p.layers)
    for (auto& b : l.biases) b = 0.1 * oracle::gaussian_matrix(b.size(), 1, rng);
  const Matrix x = random_inputs(5, 36, 7);
  const std::vector<int> y{0, 1, 2, 1, 0};
  const Gradients g = backprop(s, p, x, y);
  EXPECT_NEAR(g.loss, loss(s, p, x, y), 1e-12);

  const double h = 1e-5;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    auto check = [&](auto& param, const auto& analytic, const std::string& what) {
      Matrix fd(param.rows(), param.cols());
      for (Eigen::Index e = 0; e < param.size(); ++e) {
        const double orig = param.data()[e];
        param.data()[e] = orig + h;
        const double up = loss(s, p, x, y);
        param.data()[e] = orig - h;
        const double down = loss(s, p, x, y);
        param.data()[e] = orig;
        fd.data()[e] = (up - down) / (2 * h);
      }
      const Matrix an = analytic;
      const double rel = (fd - an).norm() / std::max(1e-12, fd.norm() + an.norm());
      EXPECT_LE(rel, 1e-4) << "layer " << li << " (" << layer_kind(s.layers[li]) << ") " << what;
    };
    for (std::size_t k = 0; k < p.layers[li].weights.size(); ++k)
      check(p.layers[li].weights[k], g.grads.layers[li].weights[k], "weights " + std::to_string(k));
    for (std::size_t k = 0; k < p.layers[li].biases.size(); ++k)
      check(p.layers[li].biases[k], g.grads.layers[li].biases[k], "bias " + std::to_string(k));
  }
}

TEST(Backprop, DuplicatedSampleWeightsTheMean) {
  const NetSpec s = all_kinds();
  const Params p = init_params(s, 8);
  const Matrix x = random_inputs(2, 36, 9);
  Matrix dup(3, 36);
  dup << x.row(0), x.row(0), x.row(1);
  const Gradients single0 = backprop(s, p, x.topRows(1), std::vector<int>{2});
  const Gradients single1 = backprop(s, p, x.bottomRows(1), std::vector<int>{1});
  const Gradients both = backprop(s, p, dup, std::vector<int>{2, 2, 1});
  for (std::size_t li = 0; li < p.layers.size(); ++li)
    for (std::size_t k = 0; k < p.layers[li].weights.size(); ++k) {
      const Matrix expect =
          (2.0 * single0.grads.layers[li].weights[k] + single1.grads.layers[li].weights[k]) / 3.0;
      EXPECT_TRUE(both.grads.layers[li].weights[k].isApprox(expect, 1e-10) ||
                  (both.grads.layers[li].weights[k] - expect).norm() < 1e-14);
    }
}

TEST(Backprop, SaturatedNetHasNoLearningSignal) {
  const NetSpec s = all_kinds();
  Params p = init_params(s, 10);
  p.layers.back().weights[0].setZero();
  p.layers.back().biases[0] << 60.0, 0.0, 0.0;
  const Gradients g = backprop(s, p, random_inputs(4, 36, 11), std::vector<int>{0, 0, 0, 0});
  double norm2 = 0.0;
  g.grads.for_each_tensor([&](const auto& t) { norm2 += t.squaredNorm(); });
  EXPECT_LT(std::sqrt(norm2), 1e-8);
}

TEST(Backprop, LabelErrors) {
  const NetSpec s = all_kinds();
  const Params p = init_params(s, 1);
  const Matrix x = random_inputs(2, 36, 1);
  EXPECT_EQ(code_of([&] { backprop(s, p, x, std::vector<int>{0, 3}); }), ErrorCode::invalid_label);
  EXPECT_EQ(code_of([&] { backprop(s, p, x, std::vector<int>{0}); }), ErrorCode::invalid_label);
  EXPECT_EQ(code_of([&] { backprop(s, p, Matrix(0, 36), std::vector<int>{}); }), ErrorCode::empty_set);
}

namespace {

// Two classes separated by which half of the image is bright.
std::pair<Matrix, std::vector<int>> halves(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  Matrix x(n, 64);
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % 2;
    for (int p = 0; p < 64; ++p) x(i, p) = 0.3 + ((p % 8 < 4) == (i % 2 == 0) ? 0.4 : 0.0) + noise(rng);
  }
  return {x, y};
}

NetSpec tiny_net() { return NetSpec::desk(2, 8, 8, 4, 4, 4); }

}  // namespace

TEST(Train, DeterministicAndLearnsSeparableTask) {
  const auto [x, y] = halves(80, 1);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.augment_probability = 0.0;
  cfg.seed = 42;
  const TrainResult a = train(tiny_net(), x, y, cfg);
  const TrainResult b = train(tiny_net(), x, y, cfg);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.history.size(), 8u);
  EXPECT_EQ(a.train_rows.size() + a.test_rows.size(), 80u);
  EXPECT_GE(a.history.back().test_accuracy, 0.9);
  cfg.seed = 43;
  EXPECT_FALSE(train(tiny_net(), x, y, cfg).params == a.params);
}

TEST(Train, DivergenceAndConfigErrors) {
  const auto [x, y] = halves(40, 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e30;
  cfg.cosine_decay = false;
  EXPECT_EQ(code_of([&] { train(tiny_net(), x, y, cfg); }), ErrorCode::training_diverged);
  cfg.learning_rate = 0.03;
  cfg.split_fraction = 1.0;
  EXPECT_EQ(code_of([&] { train(tiny_net(), x, y, cfg); }), ErrorCode::invalid_config);
  cfg.split_fraction = 0.6;
  std::vector<int> bad = y;
  bad[0] = 5;
  EXPECT_EQ(code_of([&] { train(tiny_net(), x, bad, cfg); }), ErrorCode::invalid_label);
}

TEST(Evaluate, ShapesAndEmptySet) {
  const NetSpec s = tiny_net();
  const Params p = init_params(s, 4);
  const auto [x, y] = halves(6, 3);
  const Evaluation e = evaluate(s, p, x, 1);
  EXPECT_EQ(e.target_logits.size(), 6);
  EXPECT_GE(e.accuracy, 0.0);
  EXPECT_LE(e.accuracy, 1.0);
  EXPECT_EQ(code_of([&] { evaluate(s, p, Matrix(0, 64), 0); }), ErrorCode::empty_set);
  EXPECT_EQ(code_of([&] { evaluate(s, p, x, 2); }), ErrorCode::invalid_label);
}
