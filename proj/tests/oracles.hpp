#pragma once

// Test-side reference implementations, independent of the library code paths.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse standard-normal CDF by bisection on erfc.
inline double normal_quantile(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Analytic MI (bits) of a bivariate Gaussian with correlation rho.
inline double gaussian_mi_bits(double rho) { return -0.5 * std::log2(1.0 - rho * rho); }

inline double logdet_eigen(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  return es.eigenvalues().array().log().sum();
}

// MI in bits from a joint covariance, plain log-determinants by eigenvalues, no ridge, no bias correction.
inline double mi_from_cov(const Matrix& cov, Eigen::Index dx) {
  const Eigen::Index dy = cov.rows() - dx;
  return 0.5 *
         (logdet_eigen(cov.topLeftCorner(dx, dx)) + logdet_eigen(cov.bottomRightCorner(dy, dy)) - logdet_eigen(cov)) /
         std::log(2.0);
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

inline Matrix column(const Vector& v) { return Matrix(v); }

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Least squares via normal equations (LDLT), not QR.
inline Matrix normal_equations(const Matrix& design, const Matrix& y) {
  return (design.transpose() * design).ldlt().solve(design.transpose() * y);
}

inline double pearson(const Vector& a, const Vector& b) {
  const double ma = a.mean(), mb = b.mean();
  double sab = 0, saa = 0, sbb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace oracle
