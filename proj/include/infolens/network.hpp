#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "infolens/error.hpp"
#include "infolens/genmodel.hpp"
#include "infolens/linalg.hpp"
#include "infolens/random.hpp"

namespace infolens {

// ---------------------------------------------------------------------------
// Architecture

struct Conv3x3 {
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
};
struct Dense {
  int in = 1;
  int out = 1;
};
/// x + conv(relu(conv(x))), both convolutions 3x3 / stride 1 / same width.
struct ResidualBlock {
  int channels = 1;
};
struct Relu {};
struct GlobalAvgPool {};
/// Final dense layer producing pre-softmax logits.
struct Logits {
  int in = 1;
  int n_classes = 2;
};

using LayerSpec = std::variant<Conv3x3, Dense, ResidualBlock, Relu, GlobalAvgPool, Logits>;

struct TensorShape {
  int channels = 1;
  int height = 1;
  int width = 1;

  int size() const { return channels * height * width; }
  bool operator==(const TensorShape&) const = default;
};

inline std::string layer_kind(const LayerSpec& layer) {
  return std::visit(
      [](const auto& l) -> std::string {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv3x3>) return "conv3x3";
        else if constexpr (std::is_same_v<T, Dense>) return "dense";
        else if constexpr (std::is_same_v<T, ResidualBlock>) return "residual";
        else if constexpr (std::is_same_v<T, Relu>) return "relu";
        else if constexpr (std::is_same_v<T, GlobalAvgPool>) return "gap";
        else return "logits";
      },
      layer);
}

struct NetSpec {
  int input_height = 32;
  int input_width = 32;
  int n_classes = 2;
  double input_mean = 0.0;  // inputs enter the first layer as (x - input_mean) / input_std
  double input_std = 1.0;
  double residual_init_scale = 1.0;  // multiplies the init std of each residual branch's second conv
  std::vector<LayerSpec> layers;
  std::map<std::string, int> capture_points;  // name -> index of the layer whose output is captured

  TensorShape input_shape() const { return TensorShape{1, input_height, input_width}; }

  /// Output shape of every layer; validates the chain.
  std::vector<TensorShape> shapes() const {
    if (layers.empty()) fail(ErrorCode::invalid_spec, "network has no layers");
    if (!(input_std > 0.0) || !std::isfinite(input_mean) || !(residual_init_scale >= 0.0))
      fail(ErrorCode::invalid_spec, "invalid input standardization or init scale");
    std::vector<TensorShape> out;
    TensorShape cur = input_shape();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const bool last = i + 1 == layers.size();
      const std::string where = "layer " + std::to_string(i) + " (" + layer_kind(layers[i]) + ")";
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, Conv3x3>) {
              if (l.in_channels != cur.channels || l.stride < 1 || l.out_channels < 1)
                fail(ErrorCode::invalid_spec, where + ": channel mismatch");
              cur = TensorShape{l.out_channels, (cur.height + l.stride - 1) / l.stride,
                                (cur.width + l.stride - 1) / l.stride};
            } else if constexpr (std::is_same_v<T, Dense>) {
              if (l.in != cur.size() || l.out < 1) fail(ErrorCode::invalid_spec, where + ": input width mismatch");
              cur = TensorShape{l.out, 1, 1};
            } else if constexpr (std::is_same_v<T, ResidualBlock>) {
              if (l.channels != cur.channels) fail(ErrorCode::invalid_spec, where + ": channel mismatch");
            } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
              cur = TensorShape{cur.channels, 1, 1};
            } else if constexpr (std::is_same_v<T, Logits>) {
              if (!last) fail(ErrorCode::invalid_spec, "logits layer must be last");
              if (l.in != cur.size() || l.n_classes != n_classes)
                fail(ErrorCode::invalid_spec, where + ": logits shape mismatch");
              cur = TensorShape{l.n_classes, 1, 1};
            }
          },
          layers[i]);
      out.push_back(cur);
    }
    if (!std::holds_alternative<Logits>(layers.back())) fail(ErrorCode::invalid_spec, "last layer must be logits");
    for (const auto& [name, idx] : capture_points)
      if (idx < 0 || idx >= static_cast<int>(layers.size()))
        fail(ErrorCode::invalid_spec, "capture point '" + name + "' out of range");
    return out;
  }

  /**
   * Desk residual classifier: stride-2 stem, residual stage, stride-2 widening,
   * residual stage, global average pool ("pool", the layer below the decision
   * layer), logits.
   */
  static NetSpec desk(int n_classes, int height = 32, int width = 32, int width1 = 8, int width2 = 16,
                      int width3 = 32) {
    NetSpec s;
    s.input_height = height;
    s.input_width = width;
    s.n_classes = n_classes;
    s.input_mean = 0.45;
    s.input_std = 0.2;
    s.residual_init_scale = 0.1;
    s.layers = {Conv3x3{1, width1, 2},      Relu{}, ResidualBlock{width1}, Relu{},          Conv3x3{width1, width2, 2},
                Relu{},                     ResidualBlock{width2}, Relu{}, Conv3x3{width2, width3, 2}, Relu{},
                GlobalAvgPool{},            Logits{width3, n_classes}};
    s.capture_points = {{"pool", 10}};
    return s;
  }
};

// ---------------------------------------------------------------------------
// Parameters

struct LayerParams {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

struct Params {
  std::vector<LayerParams> layers;
  std::uint64_t seed = 0;

  Eigen::Index n_values() const {
    Eigen::Index n = 0;
    for (const auto& l : layers) {
      for (const auto& w : l.weights) n += w.size();
      for (const auto& b : l.biases) n += b.size();
    }
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      for (const auto& w : l.weights)
        if (!w.allFinite()) return false;
      for (const auto& b : l.biases)
        if (!b.allFinite()) return false;
    }
    return true;
  }

  /// Visits every tensor in a fixed order (layer, weights then biases).
  template <typename F>
  void for_each_tensor(F&& f) {
    for (auto& l : layers) {
      for (auto& w : l.weights) f(w);
      for (auto& b : l.biases) f(b);
    }
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    for (const auto& l : layers) {
      for (const auto& w : l.weights) f(w);
      for (const auto& b : l.biases) f(b);
    }
  }

  bool operator==(const Params& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& a = layers[i];
      const auto& b = o.layers[i];
      if (a.weights.size() != b.weights.size() || a.biases.size() != b.biases.size()) return false;
      for (std::size_t k = 0; k < a.weights.size(); ++k)
        if (a.weights[k].rows() != b.weights[k].rows() || a.weights[k].cols() != b.weights[k].cols() ||
            a.weights[k] != b.weights[k])
          return false;
      for (std::size_t k = 0; k < a.biases.size(); ++k)
        if (a.biases[k].size() != b.biases[k].size() || a.biases[k] != b.biases[k]) return false;
    }
    return true;
  }
};

/// Zero-valued parameters with the shapes required by `spec`.
inline Params zero_params(const NetSpec& spec) {
  spec.shapes();
  Params p;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerParams lp;
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv3x3>) {
            lp.weights.push_back(Matrix::Zero(l.out_channels, 9 * l.in_channels));
            lp.biases.push_back(Vector::Zero(l.out_channels));
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            for (int k = 0; k < 2; ++k) {
              lp.weights.push_back(Matrix::Zero(l.channels, 9 * l.channels));
              lp.biases.push_back(Vector::Zero(l.channels));
            }
          } else if constexpr (std::is_same_v<T, Dense>) {
            lp.weights.push_back(Matrix::Zero(l.out, l.in));
            lp.biases.push_back(Vector::Zero(l.out));
          } else if constexpr (std::is_same_v<T, Logits>) {
            lp.weights.push_back(Matrix::Zero(l.n_classes, l.in));
            lp.biases.push_back(Vector::Zero(l.n_classes));
          }
        },
        spec.layers[i]);
    p.layers.push_back(std::move(lp));
  }
  return p;
}

/// He-style fan-in initialization (std sqrt(2 / fan_in); logits use sqrt(1 / fan_in)); biases zero.
inline Params init_params(const NetSpec& spec, std::uint64_t seed) {
  Params p = zero_params(spec);
  p.seed = seed;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const bool logits = std::holds_alternative<Logits>(spec.layers[i]);
    const bool residual = std::holds_alternative<ResidualBlock>(spec.layers[i]);
    for (std::size_t t = 0; t < p.layers[i].weights.size(); ++t) {
      auto& w = p.layers[i].weights[t];
      double std_dev = std::sqrt((logits ? 1.0 : 2.0) / static_cast<double>(w.cols()));
      if (residual && t == 1) std_dev *= spec.residual_init_scale;
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = std_dev * normal(rng);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Kernels. Activations are (features x batch); features are channel-major c*H*W + y*W + x.

namespace detail {

struct ConvGeometry {
  TensorShape in;
  TensorShape out;
  int stride = 1;
};

inline ConvGeometry conv_geometry(const TensorShape& in, int out_channels, int stride) {
  return ConvGeometry{in, TensorShape{out_channels, (in.height + stride - 1) / stride, (in.width + stride - 1) / stride},
                      stride};
}

// Columns: rows (c*9 + ky*3 + kx), columns (b*HoWo + p); zero padding of 1.
inline Matrix im2col(const Matrix& x, const ConvGeometry& g) {
  const int hw_out = g.out.height * g.out.width;
  const Eigen::Index batch = x.cols();
  Matrix cols = Matrix::Zero(9 * g.in.channels, hw_out * batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int c = 0; c < g.in.channels; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const Eigen::Index row = c * 9 + ky * 3 + kx;
          for (int oy = 0; oy < g.out.height; ++oy) {
            const int iy = oy * g.stride + ky - 1;
            if (iy < 0 || iy >= g.in.height) continue;
            for (int ox = 0; ox < g.out.width; ++ox) {
              const int ix = ox * g.stride + kx - 1;
              if (ix < 0 || ix >= g.in.width) continue;
              cols(row, b * hw_out + oy * g.out.width + ox) =
                  x(c * g.in.height * g.in.width + iy * g.in.width + ix, b);
            }
          }
        }
  return cols;
}

inline Matrix col2im(const Matrix& cols, const ConvGeometry& g, Eigen::Index batch) {
  const int hw_out = g.out.height * g.out.width;
  Matrix x = Matrix::Zero(g.in.size(), batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int c = 0; c < g.in.channels; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const Eigen::Index row = c * 9 + ky * 3 + kx;
          for (int oy = 0; oy < g.out.height; ++oy) {
            const int iy = oy * g.stride + ky - 1;
            if (iy < 0 || iy >= g.in.height) continue;
            for (int ox = 0; ox < g.out.width; ++ox) {
              const int ix = ox * g.stride + kx - 1;
              if (ix < 0 || ix >= g.in.width) continue;
              x(c * g.in.height * g.in.width + iy * g.in.width + ix, b) +=
                  cols(row, b * hw_out + oy * g.out.width + ox);
            }
          }
        }
  return x;
}

// (channels x HoWo*batch) <-> (channels*HoWo x batch)
inline Matrix unfold_channels(const Matrix& m, int channels, int hw, Eigen::Index batch) {
  Matrix out(static_cast<Eigen::Index>(channels) * hw, batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    Eigen::Map<Matrix>(out.col(b).data(), hw, channels) = m.middleCols(b * hw, hw).transpose();
  return out;
}

inline Matrix fold_channels(const Matrix& x, int channels, int hw) {
  const Eigen::Index batch = x.cols();
  Matrix out(channels, static_cast<Eigen::Index>(hw) * batch);
  for (Eigen::Index b = 0; b < batch; ++b)
    out.middleCols(b * hw, hw) = Eigen::Map<const Matrix>(x.col(b).data(), hw, channels).transpose();
  return out;
}

struct ConvCache {
  Matrix cols;
};

inline Matrix conv_forward(const Matrix& x, const Matrix& w, const Vector& bias, const ConvGeometry& g,
                           ConvCache* cache) {
  Matrix cols = im2col(x, g);
  Matrix y = w * cols;
  y.colwise() += bias;
  const int hw = g.out.height * g.out.width;
  Matrix out = unfold_channels(y, g.out.channels, hw, x.cols());
  if (cache) cache->cols = std::move(cols);
  return out;
}

inline Matrix conv_backward(const Matrix& grad_out, const Matrix& w, const ConvGeometry& g, const ConvCache& cache,
                            Matrix& grad_w, Vector& grad_b) {
  const int hw = g.out.height * g.out.width;
  const Matrix gy = fold_channels(grad_out, g.out.channels, hw);
  grad_w += gy * cache.cols.transpose();
  grad_b += gy.rowwise().sum();
  return col2im(w.transpose() * gy, g, grad_out.cols());
}

struct LayerCache {
  Matrix input;
  ConvCache conv1;
  ConvCache conv2;
  Matrix hidden;  // residual: pre-activation of the first conv
};

}  // namespace detail

struct ForwardResult {
  Matrix logits;                            // n x n_classes
  std::map<std::string, Matrix> captures;   // n x units
};

namespace detail {

struct ForwardTrace {
  std::vector<LayerCache> caches;
  Matrix logits;  // classes x batch
};

inline void check_input(const NetSpec& spec, const Matrix& inputs) {
  if (inputs.cols() != spec.input_height * spec.input_width)
    fail(ErrorCode::invalid_input, "input has " + std::to_string(inputs.cols()) + " pixels, expected " +
                                       std::to_string(spec.input_height * spec.input_width));
  if (!inputs.allFinite()) fail(ErrorCode::invalid_input, "non-finite input pixels");
}

// x: features x batch. Calls on_output(layer_index, activation) after every layer.
template <typename OnOutput>
Matrix run_forward(const NetSpec& spec, const Params& params, Matrix x, std::vector<LayerCache>* caches,
                   OnOutput&& on_output) {
  TensorShape cur = spec.input_shape();
  const auto shapes = spec.shapes();
  if (params.layers.size() != spec.layers.size()) fail(ErrorCode::invalid_input, "params do not match network");
  if (caches) caches->assign(spec.layers.size(), LayerCache{});
  if (spec.input_mean != 0.0 || spec.input_std != 1.0) x = (x.array() - spec.input_mean) / spec.input_std;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerParams& lp = params.layers[i];
    LayerCache* cache = caches ? &(*caches)[i] : nullptr;
    if (cache) cache->input = x;
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv3x3>) {
            x = conv_forward(x, lp.weights[0], lp.biases[0], conv_geometry(cur, l.out_channels, l.stride),
                             cache ? &cache->conv1 : nullptr);
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            const auto g = conv_geometry(cur, l.channels, 1);
            Matrix h = conv_forward(x, lp.weights[0], lp.biases[0], g, cache ? &cache->conv1 : nullptr);
            if (cache) cache->hidden = h;
            h = h.cwiseMax(0.0);
            x += conv_forward(h, lp.weights[1], lp.biases[1], g, cache ? &cache->conv2 : nullptr);
          } else if constexpr (std::is_same_v<T, Relu>) {
            x = x.cwiseMax(0.0);
          } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
            const int hw = cur.height * cur.width;
            Matrix pooled(cur.channels, x.cols());
            for (int c = 0; c < cur.channels; ++c) pooled.row(c) = x.middleRows(c * hw, hw).colwise().mean();
            x = std::move(pooled);
          } else {
            Matrix y = lp.weights[0] * x;
            y.colwise() += lp.biases[0];
            x = std::move(y);
          }
        },
        spec.layers[i]);
    cur = shapes[i];
    on_output(static_cast<int>(i), x);
  }
  return x;
}

}  // namespace detail

/**
 * Batched forward pass. `inputs` holds one trial per row (H*W pixels). Captures,
 * when requested, hold one row per trial for every capture point.
 */
inline ForwardResult forward(const NetSpec& spec, const Params& params, const Matrix& inputs, bool capture = false,
                             Eigen::Index chunk = 256) {
  detail::check_input(spec, inputs);
  ForwardResult out;
  out.logits.resize(inputs.rows(), spec.n_classes);
  const auto shapes = spec.shapes();
  if (capture)
    for (const auto& [name, idx] : spec.capture_points)
      out.captures[name].resize(inputs.rows(), shapes[static_cast<std::size_t>(idx)].size());
  for (Eigen::Index start = 0; start < inputs.rows(); start += chunk) {
    const Eigen::Index len = std::min(chunk, inputs.rows() - start);
    const Matrix x = inputs.middleRows(start, len).transpose();
    const Matrix logits = detail::run_forward(spec, params, x, nullptr, [&](int idx, const Matrix& act) {
      if (!capture) return;
      for (const auto& [name, at] : spec.capture_points)
        if (at == idx) out.captures[name].middleRows(start, len) = act.transpose();
    });
    out.logits.middleRows(start, len) = logits.transpose();
  }
  return out;
}

/// Single-trial convenience overload.
inline ForwardResult forward(const NetSpec& spec, const Params& params, const Vector& pixels, bool capture = false) {
  return forward(spec, params, Matrix(pixels.transpose()), capture);
}

/// Mean softmax cross-entropy (nats) of logits (n x classes) against labels.
inline double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

struct Gradients {
  Params grads;
  double loss = 0.0;
  Matrix logits;  // n x n_classes, from the same forward pass
};

/// Exact gradients of the mean softmax cross-entropy over the batch.
inline Gradients backprop(const NetSpec& spec, const Params& params, const Matrix& batch, std::span<const int> labels) {
  if (batch.rows() == 0) fail(ErrorCode::empty_set, "empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != batch.rows()) fail(ErrorCode::invalid_label, "label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= spec.n_classes) fail(ErrorCode::invalid_label, "label " + std::to_string(y) + " out of range");
  detail::check_input(spec, batch);

  const auto shapes = spec.shapes();
  std::vector<detail::LayerCache> caches;
  const Matrix logits = detail::run_forward(spec, params, batch.transpose(), &caches, [](int, const Matrix&) {});
  const Eigen::Index n = batch.rows();

  Gradients out;
  out.grads = zero_params(spec);
  // softmax - onehot, averaged over the batch
  Matrix g(logits.rows(), n);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < n; ++b) {
    const double m = logits.col(b).maxCoeff();
    const Vector e = (logits.col(b).array() - m).exp();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(b)];
    loss += std::log(z) + m - logits(y, b);
    g.col(b) = e / z;
    g(y, b) -= 1.0;
  }
  g /= static_cast<double>(n);
  out.loss = loss / static_cast<double>(n);
  out.logits = logits.transpose();

  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const TensorShape in_shape = i == 0 ? spec.input_shape() : shapes[i - 1];
    const LayerParams& lp = params.layers[i];
    LayerParams& gp = out.grads.layers[i];
    const detail::LayerCache& cache = caches[i];
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv3x3>) {
            g = detail::conv_backward(g, lp.weights[0], detail::conv_geometry(in_shape, l.out_channels, l.stride),
                                      cache.conv1, gp.weights[0], gp.biases[0]);
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            const auto geo = detail::conv_geometry(in_shape, l.channels, 1);
            Matrix gh = detail::conv_backward(g, lp.weights[1], geo, cache.conv2, gp.weights[1], gp.biases[1]);
            gh = gh.cwiseProduct((cache.hidden.array() > 0.0).cast<double>().matrix());
            g += detail::conv_backward(gh, lp.weights[0], geo, cache.conv1, gp.weights[0], gp.biases[0]);
          } else if constexpr (std::is_same_v<T, Relu>) {
            g = g.cwiseProduct((cache.input.array() > 0.0).cast<double>().matrix());
          } else if constexpr (std::is_same_v<T, GlobalAvgPool>) {
            const int hw = in_shape.height * in_shape.width;
            Matrix gi(in_shape.size(), n);
            for (int c = 0; c < in_shape.channels; ++c)
              gi.middleRows(c * hw, hw) = (g.row(c) / static_cast<double>(hw)).replicate(hw, 1);
            g = std::move(gi);
          } else {
            gp.weights[0] += g * cache.input.transpose();
            gp.biases[0] += g.rowwise().sum();
            g = lp.weights[0].transpose() * g;
          }
        },
        spec.layers[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double split_fraction = 0.6;
  int batch_size = 32;
  double learning_rate = 0.03;
  double momentum = 0.9;
  bool cosine_decay = true;  // learning rate follows a half cosine from learning_rate to 0 over all steps
  int epochs = 10;
  double augment_probability = 0.3;
  double scale_min = 1.0;
  double scale_max = 2.0;
  double translate_max = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
      fail(ErrorCode::invalid_config, "split_fraction must be in (0, 1)");
    if (batch_size < 1 || epochs < 1 || !(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0)
      fail(ErrorCode::invalid_config, "invalid optimizer settings");
    if (!(scale_min >= 1.0 && scale_max <= 2.0 && scale_min <= scale_max) || translate_max < 0.0 ||
        translate_max > 0.3)
      fail(ErrorCode::invalid_config, "augmentation ranges outside scale [1, 2], translation [0, 0.3]");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct TrainResult {
  Params params;
  std::vector<EpochRecord> history;
  std::vector<Eigen::Index> train_rows;
  std::vector<Eigen::Index> test_rows;
};

inline double accuracy(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() == 0) fail(ErrorCode::empty_set, "accuracy of an empty set");
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    hits += arg == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

/// Per-class shuffled split: the first round(split_fraction * count) rows of every class train.
inline std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> stratified_split(std::span<const int> labels,
                                                                                        double fraction,
                                                                                        std::uint64_t seed) {
  std::map<int, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  Rng rng(seed);
  std::vector<Eigen::Index> train, test;
  for (auto& [label, rows] : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto cut = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(rows.size())));
    train.insert(train.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cut));
    test.insert(test.end(), rows.begin() + static_cast<std::ptrdiff_t>(cut), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace detail

/**
 * Mini-batch SGD with momentum on a stratified split. Every training image is
 * re-augmented each epoch (random scale and signed translation) from a stream
 * seeded by the run seed, so the result is a deterministic function of the inputs.
 */
inline TrainResult train(const NetSpec& spec, const Matrix& images, std::span<const int> labels,
                         const TrainConfig& config) {
  config.validate();
  spec.shapes();
  if (static_cast<Eigen::Index>(labels.size()) != images.rows())
    fail(ErrorCode::invalid_label, "label count does not match image count");
  for (int y : labels)
    if (y < 0 || y >= spec.n_classes) fail(ErrorCode::invalid_label, "label " + std::to_string(y) + " out of range");

  TrainResult result;
  std::tie(result.train_rows, result.test_rows) =
      stratified_split(labels, config.split_fraction, derive_seed(config.seed, "split"));
  {
    std::vector<int> seen;
    for (auto r : result.train_rows) {
      const int y = labels[static_cast<std::size_t>(r)];
      if (std::find(seen.begin(), seen.end(), y) == seen.end()) seen.push_back(y);
    }
    if (seen.size() < 2) fail(ErrorCode::invalid_config, "training split needs at least 2 classes");
  }

  Params params = init_params(spec, derive_seed(config.seed, "init"));
  Params velocity = zero_params(spec);
  Rng order_rng(derive_seed(config.seed, "order"));
  Rng aug_rng(derive_seed(config.seed, "augment"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const Matrix test_images = detail::gather_rows(images, result.test_rows);
  std::vector<int> test_labels;
  for (auto r : result.test_rows) test_labels.push_back(labels[static_cast<std::size_t>(r)]);

  std::vector<Eigen::Index> order = result.train_rows;
  const std::size_t steps_per_epoch =
      (order.size() + static_cast<std::size_t>(config.batch_size) - 1) / static_cast<std::size_t>(config.batch_size);
  const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;
  double step = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    Eigen::Index hits = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      Matrix batch(static_cast<Eigen::Index>(len), images.cols());
      std::vector<int> batch_labels(len);
      for (std::size_t k = 0; k < len; ++k) {
        const Eigen::Index row = order[start + k];
        batch_labels[k] = labels[static_cast<std::size_t>(row)];
        Vector img = images.row(row).transpose();
        if (unit(aug_rng) < config.augment_probability) {
          const double s = config.scale_min + (config.scale_max - config.scale_min) * unit(aug_rng);
          const double tx = (unit(aug_rng) < 0.5 ? -1.0 : 1.0) * config.translate_max * unit(aug_rng);
          const double ty = (unit(aug_rng) < 0.5 ? -1.0 : 1.0) * config.translate_max * unit(aug_rng);
          img = scale_translate(img, spec.input_height, spec.input_width, s, tx, ty);
        }
        batch.row(static_cast<Eigen::Index>(k)) = img.transpose();
      }
      const Gradients grad = backprop(spec, params, batch, batch_labels);
      if (!std::isfinite(grad.loss))
        fail(ErrorCode::training_diverged, "loss became non-finite in epoch " + std::to_string(epoch));
      loss_sum += grad.loss * static_cast<double>(len);

      hits += static_cast<Eigen::Index>(std::lround(accuracy(grad.logits, batch_labels) * static_cast<double>(len)));

      const double lr = config.cosine_decay
                            ? 0.5 * config.learning_rate * (1.0 + std::cos(std::numbers::pi * step / total_steps))
                            : config.learning_rate;
      step += 1.0;
      for (std::size_t li = 0; li < params.layers.size(); ++li) {
        auto& p = params.layers[li];
        auto& v = velocity.layers[li];
        const auto& gr = grad.grads.layers[li];
        for (std::size_t k = 0; k < p.weights.size(); ++k) {
          v.weights[k] = config.momentum * v.weights[k] - lr * gr.weights[k];
          p.weights[k] += v.weights[k];
        }
        for (std::size_t k = 0; k < p.biases.size(); ++k) {
          v.biases[k] = config.momentum * v.biases[k] - lr * gr.biases[k];
          p.biases[k] += v.biases[k];
        }
      }
    }
    if (!params.all_finite()) fail(ErrorCode::training_diverged, "parameters became non-finite");

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(order.size());
    if (!test_labels.empty()) {
      const Matrix logits = forward(spec, params, test_images).logits;
      rec.test_loss = cross_entropy(logits, test_labels);
      rec.test_accuracy = accuracy(logits, test_labels);
    }
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.test_loss))
      fail(ErrorCode::training_diverged, "loss became non-finite in epoch " + std::to_string(rec.epoch));
    result.history.push_back(rec);
  }
  result.params = std::move(params);
  return result;
}

struct Evaluation {
  double accuracy = 0.0;  // fraction of trials whose argmax is the target
  Vector target_logits;   // pre-argmax value of the target unit per trial
};

inline Evaluation evaluate(const NetSpec& spec, const Params& params, const Matrix& stimuli, int target_id) {
  if (stimuli.rows() == 0) fail(ErrorCode::empty_set, "no stimuli to evaluate");
  if (target_id < 0 || target_id >= spec.n_classes) fail(ErrorCode::invalid_label, "target id out of range");
  const Matrix logits = forward(spec, params, stimuli).logits;
  const std::vector<int> targets(static_cast<std::size_t>(stimuli.rows()), target_id);
  return Evaluation{accuracy(logits, targets), logits.col(target_id)};
}

}  // namespace infolens
