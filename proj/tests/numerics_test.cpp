#include "crdw/numerics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "crdw/rng.hpp"
#include "test_support.hpp"

namespace crdw {
namespace {

using testing::random_matrix;
using testing::random_psd;
using testing::random_spd;
using testing::random_stable;
using testing::random_symmetric;

TEST(Lyapunov, ZeroDynamicsReturnsQ) {
  for (int n : {1, 3, 6}) {
    const Matrix P = solve_discrete_lyapunov(Matrix::Zero(n, n), Matrix::Identity(n, n));
    EXPECT_TRUE(P.isApprox(Matrix::Identity(n, n), 1e-15));
  }
}

TEST(Lyapunov, ScalarGeometricSeries) {
  const Matrix P = solve_discrete_lyapunov(Matrix::Constant(1, 1, 0.5), Matrix::Constant(1, 1, 1.0));
  EXPECT_NEAR(P(0, 0), 4.0 / 3.0, 1e-14);
}

TEST(Lyapunov, RandomStableSystemsMeetResidualTarget) {
  RngStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 1 + trial % 8;
    const Matrix F = random_stable(rng, n, 0.2 + 0.7 * rng.uniform());
    const Matrix Q = random_psd(rng, n, 1 + trial % static_cast<int>(n));
    const Matrix P = solve_discrete_lyapunov(F, Q);
    EXPECT_LE(lyapunov_residual<double>(F, Q, P), 1e-10 * std::max(1.0, Q.norm()));
    EXPECT_TRUE(is_symmetric(P, 1e-12));
    EXPECT_GE(min_eigenvalue(P), -1e-12 * P.norm());
  }
}

TEST(Lyapunov, SolutionIndependentOfInitialIterate) {
  RngStream rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 2 + trial % 5;
    const Matrix F = random_stable(rng, n, 0.9);
    const Matrix Q = random_spd(rng, n);
    const Matrix P0 = solve_discrete_lyapunov(F, Q);
    const Matrix P1 = solve_discrete_lyapunov(F, Q, Matrix(100.0 * random_spd(rng, n)));
    EXPECT_LE((P0 - P1).norm(), 1e-9);
  }
}

TEST(Lyapunov, RejectsUnstableDynamics) {
  Matrix F(2, 2);
  F << 1.0, 0.1, 0.0, 0.5;
  try {
    solve_discrete_lyapunov(F, Matrix::Identity(2, 2));
    FAIL() << "expected NotSchurStable";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotSchurStable);
  }
}

TEST(Lyapunov, WorksInLongDouble) {
  MatrixX<long double> F(1, 1), Q(1, 1);
  F << 0.5L;
  Q << 1.0L;
  EXPECT_NEAR(static_cast<double>(solve_discrete_lyapunov(F, Q)(0, 0)), 4.0 / 3.0, 1e-15);
}

TEST(ProjectPsd, FixedPoints) {
  EXPECT_TRUE(project_psd(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
  Matrix M = Matrix::Zero(2, 2);
  M.diagonal() << 1.0, -2.0;
  Matrix expected = Matrix::Zero(2, 2);
  expected(0, 0) = 1.0;
  EXPECT_LE((project_psd(M) - expected).norm(), 1e-15);
}

// The Frobenius projection X of M onto the PSD cone is characterized by
// X ⪰ 0, X - M ⪰ 0 and tr(X (X - M)) = 0.
TEST(ProjectPsd, SatisfiesProjectionOptimality) {
  RngStream rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const Matrix M = random_symmetric(rng, 5);
    const Matrix X = project_psd(M);
    EXPECT_GE(min_eigenvalue(X), -1e-12);
    EXPECT_GE(min_eigenvalue(Matrix(X - M)), -1e-12);
    EXPECT_NEAR((X * (X - M)).trace(), 0.0, 1e-11);
    EXPECT_LE((project_psd(X) - X).norm(), 1e-12);  // idempotent
    for (int s = 0; s < 10; ++s) {
      const Matrix Y = random_psd(rng, 5, 1 + s % 5);
      EXPECT_LE((X - Y).norm(), (M - Y).norm() + 1e-12);
    }
  }
}

// Oracle: power iteration on MᵀM.
double power_iteration_norm(const Matrix& M) {
  const Matrix G = M.transpose() * M;
  Vector v = Vector::Ones(G.cols()).normalized();
  double lambda = 0.0;
  for (int it = 0; it < 100000; ++it) {
    const Vector w = G * v;
    const double next = v.dot(w);
    v = w.normalized();
    if (std::abs(next - lambda) <= 1e-15 * next) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::sqrt(lambda);
}

TEST(SpectralNorm, KnownValues) {
  EXPECT_NEAR(spectral_norm(Matrix::Identity(3, 3)), 1.0, 1e-15);
  Matrix D = Matrix::Zero(2, 2);
  D.diagonal() << 2.0, -3.0;
  EXPECT_NEAR(spectral_norm(D), 3.0, 1e-14);
}

TEST(SpectralNorm, VehicleDynamicsMatchesPowerIteration) {
  Matrix A(5, 5);
  A << 1, 0, 0, 0.1, 0,
       0.5, 1, 0, 0.025, 0,
       0, 0, 1, 0, 0.5,
       0, 0, 0, 1, 0,
       0, 0, 0, 0, 1;
  const double oracle = power_iteration_norm(A);
  EXPECT_NEAR(spectral_norm(A), oracle, 1e-10 * oracle);
  RngStream rng(31);
  const Matrix R = random_matrix(rng, 4, 6);
  EXPECT_NEAR(spectral_norm(R), power_iteration_norm(R), 1e-10 * spectral_norm(R));
}

TEST(LogdetChol, KnownValues) {
  EXPECT_NEAR(logdet_chol(Matrix::Identity(4, 4)), 0.0, 1e-15);
  Matrix D = Matrix::Zero(2, 2);
  D.diagonal() << std::numbers::e, std::numbers::e * std::numbers::e;
  EXPECT_NEAR(logdet_chol(D), 3.0, 1e-14);
}

TEST(LogdetChol, MatchesEigenvalueOracleAndIsAdditive) {
  RngStream rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix A = random_spd(rng, 5);
    Eigen::SelfAdjointEigenSolver<Matrix> es(A);
    EXPECT_NEAR(logdet_chol(A), es.eigenvalues().array().log().sum(), 1e-9);
    const Matrix B = random_spd(rng, 3);
    EXPECT_NEAR(logdet_chol(A) + logdet_chol(B), logdet_chol(blkdiag(A, B)), 1e-10);
  }
}

TEST(LogdetChol, RejectsIndefinite) {
  Matrix M = Matrix::Identity(2, 2);
  M(1, 1) = -1.0;
  try {
    logdet_chol(M);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotPositiveDefinite);
  }
}

TEST(SampleGaussian, ZeroCovarianceGivesZero) {
  RngStream rng(1);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_gaussian(rng, Matrix::Zero(3, 3)).norm(), 0.0);
}

TEST(SampleGaussian, SampleCovarianceConverges) {
  RngStream rng(2);
  Matrix acc = Matrix::Zero(2, 2);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_gaussian(rng, Matrix::Identity(2, 2));
    acc += x * x.transpose();
  }
  EXPECT_LE(spectral_norm(Matrix(acc / n - Matrix::Identity(2, 2))), 0.05);
}

TEST(SampleGaussian, DeterministicPerSeed) {
  Matrix cov = Matrix::Zero(2, 2);
  cov.diagonal() << 1.0, 4.0;
  RngStream a(99), b(99), c(100);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const Vector xa = sample_gaussian(a, cov);
    const Vector xb = sample_gaussian(b, cov);
    const Vector xc = sample_gaussian(c, cov);
    EXPECT_EQ(xa, xb);
    differs = differs || xa != xc;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.position(), b.position());
}

TEST(SampleGaussian, RankDeficientAndRoundOffNegative) {
  RngStream rng(3);
  Matrix cov = Matrix::Zero(2, 2);
  cov(0, 0) = 1.0;
  cov(1, 1) = -1e-14;
  const Vector x = sample_gaussian(rng, cov);
  EXPECT_EQ(x(1), 0.0);
  cov(1, 1) = -1e-3;
  try {
    sample_gaussian(rng, cov);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotPsd);
  }
}

TEST(RngStream, SubstreamsAreIndependentOfParentPosition) {
  RngStream a(5);
  const RngStream sub_before = a.substream(1);
  for (int i = 0; i < 10; ++i) a.standard_normal();
  RngStream s1 = sub_before;
  RngStream s2 = a.substream(1);
  EXPECT_EQ(s1.standard_normal(), s2.standard_normal());
  RngStream main(5);
  EXPECT_NE(main.substream(1).uniform(), main.uniform());
}

}  // namespace
}  // namespace crdw
