#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "infolens/error.hpp"
#include "infolens/random.hpp"

namespace infolens {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

struct CholeskyPivots {
  double logdet = 0.0;
  double min_pivot_sq = std::numeric_limits<double>::infinity();
  bool positive = true;
};

// In-place lower Cholesky on a small dense block; only the lower triangle is read.
inline CholeskyPivots cholesky_pivots(Matrix& a) {
  CholeskyPivots out;
  const Eigen::Index d = a.rows();
  for (Eigen::Index j = 0; j < d; ++j) {
    double diag = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
    out.min_pivot_sq = std::min(out.min_pivot_sq, diag);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      out.positive = false;
      return out;
    }
    const double ljj = std::sqrt(diag);
    a(j, j) = ljj;
    out.logdet += 2.0 * std::log(ljj);
    for (Eigen::Index i = j + 1; i < d; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  return out;
}

}  // namespace detail

/// Natural-log determinant of a symmetric positive definite matrix via Cholesky.
inline double chol_logdet(const Matrix& sym) {
  if (sym.rows() != sym.cols()) fail(ErrorCode::not_positive_definite, "matrix is not square");
  if (sym.rows() == 0) return 0.0;
  const double scale = std::max(1.0, sym.cwiseAbs().maxCoeff());
  if (!sym.allFinite() || (sym - sym.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    fail(ErrorCode::not_positive_definite, "matrix is not finite and symmetric");
  Matrix work = sym;
  const auto piv = detail::cholesky_pivots(work);
  if (!piv.positive) fail(ErrorCode::not_positive_definite, "non-positive pivot in Cholesky factorization");
  return piv.logdet;
}

/// Pearson correlation of two equal-length vectors; NaN when either is constant.
inline double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double denom = ca.norm() * cb.norm();
  if (denom == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return ca.dot(cb) / denom;
}

// Thin orthonormal basis for the range of `a` (Householder QR).
inline Matrix orthonormal_basis(const Matrix& a) {
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
}

struct PcaModel {
  Matrix components;          // k x d, orthonormal rows
  Vector singular_values;     // descending
  Vector explained_variance;  // singular_values^2 / (n - 1)
  double total_variance = 0.0;
  Matrix scores;              // n x k
  Vector mean;                // column means removed before the sketch
  int oversampling = 10;
  int power_iterations = 2;
  std::uint64_t seed = 0;

  Eigen::Index k() const { return components.rows(); }

  Vector explained_variance_ratio() const {
    if (total_variance <= 0.0) return Vector::Zero(explained_variance.size());
    return explained_variance / total_variance;
  }

  /// Projects new rows onto the fitted components.
  Matrix transform(const Matrix& data) const {
    return (data.rowwise() - mean.transpose()) * components.transpose();
  }
};

/**
 * Randomized PCA: column-centre, Gaussian sketch of width k + oversampling,
 * power iterations with QR re-orthonormalization between every product, then an
 * exact SVD of the small projected matrix.
 *
 * Component signs are fixed so that each component's largest-magnitude entry is
 * positive, making the output a deterministic function of (data, k, params, seed).
 */
inline PcaModel randomized_pca(const Matrix& data, int k, int oversampling = 10, int power_iterations = 2,
                               std::uint64_t seed = 0) {
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  if (k < 1 || oversampling < 0 || power_iterations < 0 || k + oversampling > std::min(n, d))
    fail(ErrorCode::invalid_rank, "need 1 <= k and k + oversampling <= min(n, d); got k=" + std::to_string(k) +
                                      " oversampling=" + std::to_string(oversampling) + " for " +
                                      std::to_string(n) + "x" + std::to_string(d));
  if (!data.allFinite()) fail(ErrorCode::invalid_data, "non-finite entries in PCA input");

  PcaModel model;
  model.oversampling = oversampling;
  model.power_iterations = power_iterations;
  model.seed = seed;
  model.mean = data.colwise().mean().transpose();
  const Matrix centered = data.rowwise() - model.mean.transpose();
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  model.total_variance = centered.squaredNorm() / denom;

  const Eigen::Index width = k + oversampling;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix omega(d, width);
  for (Eigen::Index j = 0; j < width; ++j)
    for (Eigen::Index i = 0; i < d; ++i) omega(i, j) = normal(rng);

  Matrix q = orthonormal_basis(centered * omega);
  for (int it = 0; it < power_iterations; ++it) {
    const Matrix z = orthonormal_basis(centered.transpose() * q);
    q = orthonormal_basis(centered * z);
  }

  const Matrix small = q.transpose() * centered;  // width x d
  Eigen::JacobiSVD<Matrix> svd(small, Eigen::ComputeThinV);
  Matrix v = svd.matrixV().leftCols(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg = 0;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0.0) v.col(c) = -v.col(c);
  }
  model.components = v.transpose();
  model.singular_values = svd.singularValues().head(k);
  model.explained_variance = model.singular_values.array().square() / denom;
  model.scores = centered * v;
  return model;
}

struct Rdm {
  Matrix dissimilarity;  // 1 - Pearson between rows
  std::vector<int> block_labels;
  double within_block_mean = std::numeric_limits<double>::quiet_NaN();
  double between_block_mean = std::numeric_limits<double>::quiet_NaN();

  double within_between_ratio() const { return within_block_mean / between_block_mean; }
};

/// Representational dissimilarity matrix with entries 1 - pearson(row_i, row_j).
/// Block means are NaN when no pair of the corresponding kind exists.
inline Rdm rdm(const Matrix& scores, std::vector<int> block_labels) {
  const Eigen::Index n = scores.rows();
  if (scores.cols() < 2) fail(ErrorCode::invalid_rank, "RDM needs at least 2 score columns");
  if (static_cast<Eigen::Index>(block_labels.size()) != n)
    fail(ErrorCode::invalid_data, "block label count does not match row count");
  if (!scores.allFinite()) fail(ErrorCode::invalid_data, "non-finite scores");

  Matrix z = scores.colwise() - scores.rowwise().mean();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = z.row(i).norm();
    if (norm <= 1e-12 * std::max(1.0, scores.row(i).norm()))
      fail(ErrorCode::degenerate_row, "row " + std::to_string(i) + " has zero variance");
    z.row(i) /= norm;
  }

  Rdm out;
  out.dissimilarity = Matrix::Ones(n, n) - z * z.transpose();
  double within = 0.0, between = 0.0;
  std::size_t n_within = 0, n_between = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    out.dissimilarity(j, j) = 0.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = std::clamp(out.dissimilarity(i, j), 0.0, 2.0);
      out.dissimilarity(i, j) = v;
      out.dissimilarity(j, i) = v;
      if (block_labels[i] == block_labels[j]) {
        within += v;
        ++n_within;
      } else {
        between += v;
        ++n_between;
      }
    }
  }
  if (n_within > 0) out.within_block_mean = within / static_cast<double>(n_within);
  if (n_between > 0) out.between_block_mean = between / static_cast<double>(n_between);
  out.block_labels = std::move(block_labels);
  return out;
}

}  // namespace infolens
