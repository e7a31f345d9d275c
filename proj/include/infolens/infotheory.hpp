#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/digamma.hpp>

#include "infolens/error.hpp"
#include "infolens/linalg.hpp"
#include "infolens/random.hpp"

namespace infolens {

/// Samples whose columns have been rank-normalized onto standard-normal quantiles.
class CopulaMatrix {
 public:
  CopulaMatrix() = default;

  const Matrix& data() const noexcept { return data_; }
  Eigen::Index rows() const noexcept { return data_.rows(); }
  Eigen::Index cols() const noexcept { return data_.cols(); }

  /// Column subset [first, first + count).
  CopulaMatrix columns(Eigen::Index first, Eigen::Index count) const {
    return CopulaMatrix(data_.middleCols(first, count));
  }

  /// Rows reordered as out.row(i) = row(order[i]). Copula columns stay valid under row permutation.
  CopulaMatrix permuted_rows(std::span<const Eigen::Index> order) const {
    Matrix out(data_.rows(), data_.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = data_.row(order[static_cast<std::size_t>(i)]);
    return CopulaMatrix(std::move(out));
  }

  /// Horizontal concatenation [a | b]; both must share the row count.
  static CopulaMatrix concat(const CopulaMatrix& a, const CopulaMatrix& b) {
    if (a.rows() != b.rows()) fail(ErrorCode::invalid_data, "row count mismatch in copula concatenation");
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a.data_, b.data_;
    return CopulaMatrix(std::move(out));
  }

 private:
  explicit CopulaMatrix(Matrix data) : data_(std::move(data)) {}
  friend CopulaMatrix copula_transform(const Matrix& samples);

  Matrix data_;
};

inline double standard_normal_quantile(double p) {
  static const boost::math::normal_distribution<double> unit;
  return boost::math::quantile(unit, p);
}

/// 1-based ranks, ties replaced by their average rank.
inline Vector average_ranks(const Eigen::Ref<const Vector>& column) {
  const Eigen::Index n = column.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return column[a] < column[b]; });
  Vector ranks(n);
  Eigen::Index start = 0;
  while (start < n) {
    Eigen::Index stop = start + 1;
    while (stop < n && column[order[stop]] == column[order[start]]) ++stop;
    const double avg = 0.5 * static_cast<double>(start + 1 + stop);
    for (Eigen::Index k = start; k < stop; ++k) ranks[order[k]] = avg;
    start = stop;
  }
  return ranks;
}

/**
 * Gaussian copula normalization: each column is rank-transformed (average ranks for
 * ties) and mapped through the inverse standard-normal CDF at rank / (n + 1).
 */
inline CopulaMatrix copula_transform(const Matrix& samples) {
  const Eigen::Index n = samples.rows();
  if (n < 3) fail(ErrorCode::insufficient_samples, "copula transform needs n >= 3, got " + std::to_string(n));
  if (samples.cols() < 1) fail(ErrorCode::invalid_data, "copula transform needs at least one column");
  if (!samples.allFinite()) fail(ErrorCode::invalid_data, "non-finite entries in copula input");

  // Average ranks are half-integers, so quantiles are tabulated on a half-rank grid.
  std::vector<double> table(static_cast<std::size_t>(2 * n + 1));
  const double denom = static_cast<double>(n + 1);
  for (Eigen::Index m = 2; m <= 2 * n; ++m)
    table[static_cast<std::size_t>(m)] = standard_normal_quantile(0.5 * static_cast<double>(m) / denom);

  Matrix out(n, samples.cols());
  for (Eigen::Index c = 0; c < samples.cols(); ++c) {
    const Vector ranks = average_ranks(samples.col(c));
    for (Eigen::Index i = 0; i < n; ++i) out(i, c) = table[static_cast<std::size_t>(std::lround(2.0 * ranks[i]))];
  }
  return CopulaMatrix(std::move(out));
}

struct MiEstimate {
  double bits = 0.0;
  Eigen::Index n_samples = 0;
  Eigen::Index dims_x = 0;
  Eigen::Index dims_y = 0;
  bool bias_corrected = false;
};

struct RedEstimate {
  double bits = 0.0;  // negative values indicate synergy
  MiEstimate mi_sl;
  MiEstimate mi_sr;
  MiEstimate mi_slr;
};

namespace detail {

inline constexpr double kLn2 = 0.69314718055994530942;
// A pivot within this factor of the ridge means the ridge alone kept the matrix PD.
inline constexpr double kDegeneratePivotFactor = 1e3;
inline constexpr double kRidgeScale = 1e-12;

inline Matrix sample_covariance(const Matrix& x) {
  const Matrix c = x.rowwise() - x.colwise().mean();
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

inline double ridge_for(const Matrix& cov) {
  return kRidgeScale * cov.trace() / static_cast<double>(cov.rows());
}

// Digamma small-sample correction for the entropy of a d-dimensional Gaussian (nats).
inline double entropy_bias(Eigen::Index d, Eigen::Index n) {
  const double dterm = (kLn2 - std::log(static_cast<double>(n) - 1.0)) / 2.0;
  double psi = 0.0;
  for (Eigen::Index k = 1; k <= d; ++k) psi += boost::math::digamma(static_cast<double>(n - k) / 2.0) / 2.0;
  return static_cast<double>(d) * dterm + psi;
}

// Half log-determinant of the ridged block (entropy up to constants that cancel in MI),
// or nullopt when the block is singular after the ridge.
inline std::optional<double> half_logdet(Matrix block, double ridge) {
  block.diagonal().array() += ridge;
  const auto piv = cholesky_pivots(block);
  if (!piv.positive || piv.min_pivot_sq <= kDegeneratePivotFactor * ridge) return std::nullopt;
  return 0.5 * piv.logdet;
}

// MI in bits from the joint covariance of [x | y]; x occupies the first dx columns.
inline std::optional<double> mi_from_joint(const Matrix& joint, Eigen::Index dx, Eigen::Index n, bool bias_correct,
                                           double ridge) {
  const Eigen::Index d = joint.rows();
  const Eigen::Index dy = d - dx;
  const auto hx = half_logdet(joint.topLeftCorner(dx, dx), ridge);
  const auto hy = half_logdet(joint.bottomRightCorner(dy, dy), ridge);
  const auto hxy = half_logdet(joint, ridge);
  if (!hx || !hy || !hxy) return std::nullopt;
  double ex = *hx, ey = *hy, exy = *hxy;
  if (bias_correct) {
    ex -= entropy_bias(dx, n);
    ey -= entropy_bias(dy, n);
    exy -= entropy_bias(d, n);
  }
  return (ex + ey - exy) / kLn2;
}

struct CoInformationTerms {
  std::optional<double> sl, sr, slr;
  std::optional<double> bits() const {
    if (!sl || !sr || !slr) return std::nullopt;
    return *sl + *sr - *slr;
  }
};

// The three MI terms of Red(S;L;R) from the covariance of [S L R], sharing one ridge.
inline CoInformationTerms co_information_terms(const Matrix& cov, Eigen::Index ds, Eigen::Index dl, Eigen::Index n,
                                               bool bias_correct) {
  const Eigen::Index dr = cov.rows() - ds - dl;
  const double ridge = ridge_for(cov);
  auto pair_cov = [&](Eigen::Index off, Eigen::Index width) {
    Matrix j(ds + width, ds + width);
    j.topLeftCorner(ds, ds) = cov.topLeftCorner(ds, ds);
    j.topRightCorner(ds, width) = cov.block(0, off, ds, width);
    j.bottomLeftCorner(width, ds) = cov.block(off, 0, width, ds);
    j.bottomRightCorner(width, width) = cov.block(off, off, width, width);
    return j;
  };
  CoInformationTerms t;
  t.sl = mi_from_joint(pair_cov(ds, dl), ds, n, bias_correct, ridge);
  t.sr = mi_from_joint(pair_cov(ds + dl, dr), ds, n, bias_correct, ridge);
  t.slr = mi_from_joint(cov, ds, n, bias_correct, ridge);
  return t;
}

}  // namespace detail

/**
 * Gaussian mutual information (bits) between copula-normalized variables:
 * 0.5 * log2(det Sx * det Sy / det Sxy), log-determinants by Cholesky after a ridge
 * of 1e-12 * trace / d on the joint covariance. With bias_correct the digamma
 * small-sample correction is applied to each entropy term.
 */
inline MiEstimate gaussian_mi(const CopulaMatrix& x, const CopulaMatrix& y, bool bias_correct = true) {
  if (x.rows() != y.rows()) fail(ErrorCode::invalid_data, "x and y have different sample counts");
  const Eigen::Index n = x.rows();
  if (n < 3) fail(ErrorCode::insufficient_samples, "MI needs n >= 3");
  Matrix joint_data(n, x.cols() + y.cols());
  joint_data << x.data(), y.data();
  const Matrix joint = detail::sample_covariance(joint_data);
  const auto bits = detail::mi_from_joint(joint, x.cols(), n, bias_correct, detail::ridge_for(joint));
  if (!bits) fail(ErrorCode::degenerate_variables, "joint covariance is singular after ridge");
  return MiEstimate{*bits, n, x.cols(), y.cols(), bias_correct};
}

/**
 * Co-information Red(S;L;R) = MI(S;L) + MI(S;R) - MI(S;[L R]).
 * All three terms share one covariance of [S L R] and one ridge.
 */
inline RedEstimate co_information(const CopulaMatrix& s, const CopulaMatrix& l, const CopulaMatrix& r,
                                  bool bias_correct = true) {
  if (s.rows() != l.rows() || s.rows() != r.rows())
    fail(ErrorCode::invalid_data, "S, L and R have different sample counts");
  const Eigen::Index n = s.rows();
  if (n < 3) fail(ErrorCode::insufficient_samples, "redundancy needs n >= 3");
  const Eigen::Index ds = s.cols(), dl = l.cols(), dr = r.cols();
  Matrix all(n, ds + dl + dr);
  all << s.data(), l.data(), r.data();
  const auto terms = detail::co_information_terms(detail::sample_covariance(all), ds, dl, n, bias_correct);
  if (!terms.sl) fail(ErrorCode::degenerate_variables, "MI(S;L) joint covariance is singular after ridge");
  if (!terms.sr) fail(ErrorCode::degenerate_variables, "MI(S;R) joint covariance is singular after ridge");
  if (!terms.slr) fail(ErrorCode::degenerate_variables, "MI(S;[L R]) joint covariance is singular after ridge");

  RedEstimate out;
  out.mi_sl = MiEstimate{*terms.sl, n, ds, dl, bias_correct};
  out.mi_sr = MiEstimate{*terms.sr, n, ds, dr, bias_correct};
  out.mi_slr = MiEstimate{*terms.slr, n, ds, dl + dr, bias_correct};
  out.bits = out.mi_sl.bits + out.mi_sr.bits - out.mi_slr.bits;
  return out;
}

/**
 * Batched per-feature MI between groups of `feature_dims` adjacent columns and one
 * shared response. Covariances of the features and of the response are fixed under
 * row permutations of the response, so each permutation costs one cross-product.
 */
class FeatureMi {
 public:
  FeatureMi(const CopulaMatrix& features, Eigen::Index feature_dims, const CopulaMatrix& response,
            bool bias_correct = true)
      : dims_(feature_dims), bias_correct_(bias_correct) {
    if (feature_dims < 1 || features.cols() % feature_dims != 0)
      fail(ErrorCode::invalid_data, "feature column count is not a multiple of feature_dims");
    if (features.rows() != response.rows()) fail(ErrorCode::invalid_data, "feature and response row counts differ");
    n_ = features.rows();
    if (n_ < 3) fail(ErrorCode::insufficient_samples, "MI needs n >= 3");
    x_ = features.data().rowwise() - features.data().colwise().mean();
    y_ = response.data().rowwise() - response.data().colwise().mean();
    const double scale = 1.0 / static_cast<double>(n_ - 1);
    yy_ = (y_.transpose() * y_) * scale;
    const Eigen::Index f = n_features();
    xx_.resize(static_cast<std::size_t>(f));
    for (Eigen::Index k = 0; k < f; ++k) {
      const auto block = x_.middleCols(k * dims_, dims_);
      xx_[static_cast<std::size_t>(k)] = (block.transpose() * block) * scale;
    }
  }

  Eigen::Index n_features() const noexcept { return x_.cols() / dims_; }
  Eigen::Index n_samples() const noexcept { return n_; }

  /// MI per feature, nullopt where the feature (or its pairing) is degenerate.
  /// `order` permutes response rows: response row order[i] is paired with feature row i.
  std::vector<std::optional<double>> compute(std::span<const Eigen::Index> order = {}) const {
    Matrix cross;
    const double scale = 1.0 / static_cast<double>(n_ - 1);
    if (order.empty()) {
      cross = (x_.transpose() * y_) * scale;
    } else {
      Matrix yp(n_, y_.cols());
      for (Eigen::Index i = 0; i < n_; ++i) yp.row(i) = y_.row(order[static_cast<std::size_t>(i)]);
      cross = (x_.transpose() * yp) * scale;
    }
    const Eigen::Index dy = y_.cols();
    const Eigen::Index d = dims_ + dy;
    std::vector<std::optional<double>> out(static_cast<std::size_t>(n_features()));
    Matrix joint(d, d);
    for (Eigen::Index k = 0; k < n_features(); ++k) {
      joint.topLeftCorner(dims_, dims_) = xx_[static_cast<std::size_t>(k)];
      joint.topRightCorner(dims_, dy) = cross.middleRows(k * dims_, dims_);
      joint.bottomLeftCorner(dy, dims_) = cross.middleRows(k * dims_, dims_).transpose();
      joint.bottomRightCorner(dy, dy) = yy_;
      const double ridge = detail::ridge_for(joint);
      out[static_cast<std::size_t>(k)] = detail::mi_from_joint(joint, dims_, n_, bias_correct_, ridge);
    }
    return out;
  }

 private:
  Eigen::Index dims_;
  bool bias_correct_;
  Eigen::Index n_ = 0;
  Matrix x_;
  Matrix y_;
  Matrix yy_;
  std::vector<Matrix> xx_;
};

/**
 * Batched per-feature co-information Red(S_f; L; R) against one shared (L, R) pair.
 */
class FeatureRedundancy {
 public:
  FeatureRedundancy(const CopulaMatrix& features, Eigen::Index feature_dims, const CopulaMatrix& l,
                    const CopulaMatrix& r, bool bias_correct = true)
      : dims_(feature_dims), dl_(l.cols()), bias_correct_(bias_correct) {
    if (feature_dims < 1 || features.cols() % feature_dims != 0)
      fail(ErrorCode::invalid_data, "feature column count is not a multiple of feature_dims");
    if (features.rows() != l.rows() || features.rows() != r.rows())
      fail(ErrorCode::invalid_data, "S, L and R have different sample counts");
    n_ = features.rows();
    if (n_ < 3) fail(ErrorCode::insufficient_samples, "redundancy needs n >= 3");
    Matrix lr(n_, l.cols() + r.cols());
    lr << l.data(), r.data();
    const Matrix x = features.data().rowwise() - features.data().colwise().mean();
    const Matrix y = lr.rowwise() - lr.colwise().mean();
    const double scale = 1.0 / static_cast<double>(n_ - 1);
    yy_ = (y.transpose() * y) * scale;
    cross_ = (x.transpose() * y) * scale;
    xx_.resize(static_cast<std::size_t>(n_features()));
    for (Eigen::Index k = 0; k < n_features(); ++k) {
      const auto block = x.middleCols(k * dims_, dims_);
      xx_[static_cast<std::size_t>(k)] = (block.transpose() * block) * scale;
    }
  }

  Eigen::Index n_features() const noexcept { return cross_.rows() / dims_; }

  std::vector<detail::CoInformationTerms> compute() const {
    const Eigen::Index dy = yy_.rows();
    const Eigen::Index d = dims_ + dy;
    std::vector<detail::CoInformationTerms> out(static_cast<std::size_t>(n_features()));
    Matrix cov(d, d);
    for (Eigen::Index k = 0; k < n_features(); ++k) {
      cov.topLeftCorner(dims_, dims_) = xx_[static_cast<std::size_t>(k)];
      cov.topRightCorner(dims_, dy) = cross_.middleRows(k * dims_, dims_);
      cov.bottomLeftCorner(dy, dims_) = cross_.middleRows(k * dims_, dims_).transpose();
      cov.bottomRightCorner(dy, dy) = yy_;
      out[static_cast<std::size_t>(k)] = detail::co_information_terms(cov, dims_, dl_, n_, bias_correct_);
    }
    return out;
  }

 private:
  Eigen::Index dims_;
  Eigen::Index dl_;
  bool bias_correct_;
  Eigen::Index n_ = 0;
  Matrix cross_;
  Matrix yy_;
  std::vector<Matrix> xx_;
};

struct PermutationNull {
  int n_permutations = 0;
  std::vector<double> null_max_distribution;  // ascending, bits
  double percentile_95 = 0.0;
  std::uint64_t seed = 0;
};

/// Empirical percentile with linear interpolation between order statistics.
inline double empirical_percentile(std::span<const double> sorted, double q) {
  if (sorted.empty()) fail(ErrorCode::empty_set, "percentile of an empty distribution");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline constexpr int kMinPermutations = 100;

/// Max-statistic null: shuffle response rows, recompute every feature's MI, keep the maximum.
inline PermutationNull permutation_null(const FeatureMi& engine, int n_perm, std::uint64_t seed) {
  if (n_perm < kMinPermutations)
    fail(ErrorCode::insufficient_permutations,
         "need at least " + std::to_string(kMinPermutations) + " permutations, got " + std::to_string(n_perm));
  PermutationNull out;
  out.n_permutations = n_perm;
  out.seed = seed;
  out.null_max_distribution.reserve(static_cast<std::size_t>(n_perm));
  Rng rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(engine.n_samples()));
  for (int p = 0; p < n_perm; ++p) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& v : engine.compute(order))
      if (v) best = std::max(best, *v);
    out.null_max_distribution.push_back(best);
  }
  std::sort(out.null_max_distribution.begin(), out.null_max_distribution.end());
  out.percentile_95 = empirical_percentile(out.null_max_distribution, 0.95);
  return out;
}

inline PermutationNull permutation_null(const Matrix& s, const Matrix& response, int n_perm, std::uint64_t seed,
                                        Eigen::Index feature_dims = 1, bool bias_correct = true) {
  if (n_perm < kMinPermutations)
    fail(ErrorCode::insufficient_permutations,
         "need at least " + std::to_string(kMinPermutations) + " permutations, got " + std::to_string(n_perm));
  const FeatureMi engine(copula_transform(s), feature_dims, copula_transform(response), bias_correct);
  return permutation_null(engine, n_perm, seed);
}

}  // namespace infolens
