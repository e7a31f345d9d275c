#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "infolens/linalg.hpp"
#include "oracles.hpp"

using namespace infolens;

TEST(CholLogdet, IdentityAndDiagonal) {
  EXPECT_DOUBLE_EQ(chol_logdet(Matrix::Identity(5, 5)), 0.0);
  Matrix d = Matrix::Zero(2, 2);
  d.diagonal() << 2.0, 3.0;
  EXPECT_NEAR(chol_logdet(d), std::log(6.0), 1e-14);
}

TEST(CholLogdet, MatchesEigenvalueOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    const Matrix a = oracle::gaussian_matrix(10, 10, rng);
    const Matrix pd = a * a.transpose() + 0.1 * Matrix::Identity(10, 10);
    EXPECT_NEAR(chol_logdet(pd), oracle::logdet_eigen(pd), 1e-10);
  }
}

TEST(CholLogdet, ScalingAddsDLogC) {
  std::mt19937_64 rng(2);
  const Matrix a = oracle::gaussian_matrix(6, 6, rng);
  const Matrix pd = a * a.transpose() + Matrix::Identity(6, 6);
  EXPECT_NEAR(chol_logdet(3.5 * pd), chol_logdet(pd) + 6.0 * std::log(3.5), 1e-10);
}

TEST(CholLogdet, IllConditionedStaysAccurate) {
  // A = L L^T with diag(L) = (1e3, 1, 1e-3): det A = 1, condition number near 1e12.
  Matrix l = Matrix::Zero(3, 3);
  l << 1e3, 0, 0, 1, 1, 0, 0.5, 0.25, 1e-3;
  const Matrix a = l * l.transpose();
  const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(a).eigenvalues();
  EXPECT_GT(ev.maxCoeff() / ev.minCoeff(), 1e11);
  EXPECT_NEAR(chol_logdet(a), 0.0, 1e-8);
}

TEST(CholLogdet, NonPositiveDefiniteFails) {
  Matrix a(2, 2);
  a << 1.0, 2.0, 2.0, 1.0;
  try {
    chol_logdet(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_positive_definite);
  }
}

TEST(RandomizedPca, RankOneCapturesAllVariance) {
  std::mt19937_64 rng(4);
  const Matrix u = oracle::gaussian_matrix(100, 1, rng);
  const Matrix v = oracle::gaussian_matrix(1, 30, rng);
  const PcaModel pca = randomized_pca(u * v, 3, 10, 2, 9);
  const Vector ratio = pca.explained_variance_ratio();
  EXPECT_GE(ratio[0], 0.9999);
  EXPECT_LT(ratio[1], 1e-10);
  EXPECT_LT(ratio[2], 1e-10);
}

TEST(RandomizedPca, TopSingularValuesMatchExactSvd) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const Matrix a = oracle::gaussian_matrix(200, 50, rng);
    const Matrix centered = a.rowwise() - a.colwise().mean();
    const Vector exact = Eigen::JacobiSVD<Matrix>(centered).singularValues().head(6);
    // A flat random spectrum needs far more power iterations than the default to reach 1e-6.
    const PcaModel pca = randomized_pca(a, 6, 10, 40, seed);
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(pca.singular_values[k] / exact[k], 1.0, 1e-6) << "seed " << seed;
  }
}

TEST(RandomizedPca, ComponentsOrthonormalAndVarianceDescending) {
  std::mt19937_64 rng(5);
  const Matrix a = oracle::gaussian_matrix(120, 40, rng);
  const PcaModel pca = randomized_pca(a, 8, 10, 2, 1);
  EXPECT_TRUE((pca.components * pca.components.transpose()).isApprox(Matrix::Identity(8, 8), 1e-8));
  for (int k = 1; k < 8; ++k) EXPECT_LE(pca.explained_variance[k], pca.explained_variance[k - 1]);
  EXPECT_TRUE(pca.transform(a).isApprox(pca.scores, 1e-10));
}

TEST(RandomizedPca, ReconstructionNearOptimalBelowSpectralKnee) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(200 + seed);
    const Matrix u = Eigen::HouseholderQR<Matrix>(oracle::gaussian_matrix(150, 40, rng)).householderQ() *
                     Matrix::Identity(150, 40);
    const Matrix v = Eigen::HouseholderQR<Matrix>(oracle::gaussian_matrix(40, 40, rng)).householderQ();
    Vector s(40);
    for (int i = 0; i < 40; ++i) s[i] = std::pow(0.7, i);
    const Matrix a = u * s.asDiagonal() * v.transpose();
    const int k = 5;
    const PcaModel pca = randomized_pca(a, k, 10, 2, seed);
    const Matrix centered = a.rowwise() - a.colwise().mean();
    const Vector exact = Eigen::JacobiSVD<Matrix>(centered).singularValues();
    const double optimum = std::sqrt(exact.tail(40 - k).squaredNorm());
    const double err = (centered - pca.scores * pca.components).norm();
    EXPECT_LE(err, 1.05 * optimum) << "seed " << seed;
  }
}

TEST(RandomizedPca, DeterministicAndRejectsInvalidRank) {
  std::mt19937_64 rng(6);
  const Matrix a = oracle::gaussian_matrix(60, 20, rng);
  EXPECT_EQ(randomized_pca(a, 4, 5, 2, 8).scores, randomized_pca(a, 4, 5, 2, 8).scores);
  try {
    randomized_pca(a, 15, 10, 2, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_rank);
  }
}

TEST(Rdm, IdenticalAndAntiCorrelatedRows) {
  Matrix s(3, 4);
  s << 1, 2, 3, 4, 1, 2, 3, 4, -1, -2, -3, -4;
  const Rdm r = rdm(s, {0, 0, 1});
  EXPECT_NEAR(r.dissimilarity(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(r.dissimilarity(0, 2), 2.0, 1e-12);
}

TEST(Rdm, MatchesPearsonOracleAndContract) {
  std::mt19937_64 rng(7);
  const Matrix s = oracle::gaussian_matrix(30, 6, rng);
  std::vector<int> labels(30);
  for (int i = 0; i < 30; ++i) labels[i] = i / 6;
  const Rdm r = rdm(s, labels);
  for (int i = 0; i < 30; ++i) {
    EXPECT_EQ(r.dissimilarity(i, i), 0.0);
    for (int j = 0; j < 30; ++j) {
      EXPECT_NEAR(r.dissimilarity(i, j), r.dissimilarity(j, i), 1e-10);
      EXPECT_GE(r.dissimilarity(i, j), 0.0);
      EXPECT_LE(r.dissimilarity(i, j), 2.0);
      if (i != j) {
        EXPECT_NEAR(r.dissimilarity(i, j), 1.0 - oracle::pearson(s.row(i).transpose(), s.row(j).transpose()), 1e-10);
      }
    }
  }
}

TEST(Rdm, BlockClusteredRowsAreCloserWithinBlocks) {
  std::mt19937_64 rng(8);
  const Matrix centres = oracle::gaussian_matrix(5, 6, rng);
  Matrix s(50, 6);
  std::vector<int> labels(50);
  for (int i = 0; i < 50; ++i) {
    labels[i] = i / 10;
    s.row(i) = centres.row(i / 10) + 0.3 * oracle::gaussian_matrix(1, 6, rng);
  }
  const Rdm r = rdm(s, labels);
  EXPECT_LT(r.within_block_mean, r.between_block_mean);
}

TEST(Rdm, InvariantUnderPositiveRowAffineMaps) {
  std::mt19937_64 rng(9);
  const Matrix s = oracle::gaussian_matrix(12, 5, rng);
  Matrix t = s;
  for (int i = 0; i < 12; ++i) t.row(i) = (1.0 + i) * s.row(i).array() + (3.0 - i);
  const std::vector<int> labels(12, 0);
  EXPECT_TRUE(rdm(s, labels).dissimilarity.isApprox(rdm(t, labels).dissimilarity, 1e-10));
}

TEST(Rdm, ZeroVarianceRowReportsIndex) {
  Matrix s(3, 3);
  s << 1, 2, 3, 4, 4, 4, 0, 1, 0;
  try {
    rdm(s, {0, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::degenerate_row);
    EXPECT_NE(e.message().find("row 1"), std::string::npos);
  }
}
