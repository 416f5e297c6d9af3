#pragma once

// Dense symmetric-matrix utilities. Everything here is templated on the
// scalar type and operates on Eigen dense expressions; the rest of the
// library instantiates it with double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "crdw/error.hpp"

namespace crdw {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
MatrixX<typename Derived::Scalar> symmetrize(const Eigen::MatrixBase<Derived>& M) {
  return (M + M.transpose()) / typename Derived::Scalar(2);
}

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& M,
                  typename Derived::Scalar rel_tol = 1e-12) {
  using std::abs;
  if (M.rows() != M.cols()) return false;
  const auto scale = std::max<typename Derived::Scalar>(M.cwiseAbs().maxCoeff(), 1e-300);
  return (M - M.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

template <typename Derived>
void require_square(const Eigen::MatrixBase<Derived>& M, const char* who) {
  if (M.rows() != M.cols()) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(who) + ": matrix must be square");
  }
}

/// Block-diagonal assembly; blocks need not be square.
template <typename Scalar>
MatrixX<Scalar> blkdiag(std::initializer_list<MatrixX<Scalar>> blocks) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(rows, cols);
  Eigen::Index r = 0, c = 0;
  for (const auto& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

inline Matrix blkdiag(const Matrix& a, const Matrix& b) { return blkdiag<double>({a, b}); }

template <typename Derived>
typename Derived::Scalar spectral_radius(const Eigen::MatrixBase<Derived>& F) {
  using Scalar = typename Derived::Scalar;
  require_square(F, "spectral_radius");
  if (F.size() == 0) return Scalar(0);
  Eigen::EigenSolver<MatrixX<Scalar>> es(F.eval(), /*computeEigenvectors=*/false);
  if (es.info() != Eigen::Success) {
    throw Error(ErrorCode::kNonConvergence, "spectral_radius: eigensolver failed");
  }
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Largest singular value.
template <typename Derived>
typename Derived::Scalar spectral_norm(const Eigen::MatrixBase<Derived>& M) {
  using Scalar = typename Derived::Scalar;
  if (M.size() == 0) return Scalar(0);
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(M.eval());
  return svd.singularValues()(0);
}

template <typename Derived>
typename Derived::Scalar min_eigenvalue(const Eigen::MatrixBase<Derived>& M) {
  using Scalar = typename Derived::Scalar;
  require_square(M, "min_eigenvalue");
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(symmetrize(M), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Nearest PSD matrix in Frobenius norm: eigenvalues clipped at zero.
template <typename Derived>
MatrixX<typename Derived::Scalar> project_psd(const Eigen::MatrixBase<Derived>& M) {
  using Scalar = typename Derived::Scalar;
  require_square(M, "project_psd");
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(symmetrize(M));
  const VectorX<Scalar> clipped = es.eigenvalues().cwiseMax(Scalar(0));
  return symmetrize(es.eigenvectors() * clipped.asDiagonal() *
                    es.eigenvectors().transpose());
}

/// Returns a factor R with R Rᵀ = cov, tolerating round-off negativity.
/// Throws NotPSD if the smallest eigenvalue is below -1e-10 ‖cov‖₂.
template <typename Derived>
MatrixX<typename Derived::Scalar> psd_factor(const Eigen::MatrixBase<Derived>& cov) {
  using Scalar = typename Derived::Scalar;
  require_square(cov, "psd_factor");
  if (cov.size() == 0) return MatrixX<Scalar>(0, 0);
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(symmetrize(cov));
  const VectorX<Scalar>& lambda = es.eigenvalues();
  const Scalar norm2 = lambda.cwiseAbs().maxCoeff();
  if (lambda(0) < -Scalar(1e-10) * norm2) {
    throw Error(ErrorCode::kNotPsd, "covariance has eigenvalue " + std::to_string(double(lambda(0))));
  }
  return es.eigenvectors() * lambda.cwiseMax(Scalar(0)).cwiseSqrt().asDiagonal();
}

/// log det M through a Cholesky factorization.
template <typename Derived>
typename Derived::Scalar logdet_chol(const Eigen::MatrixBase<Derived>& M) {
  using Scalar = typename Derived::Scalar;
  require_square(M, "logdet_chol");
  Eigen::LLT<MatrixX<Scalar>> llt(M.eval());
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotPositiveDefinite, "logdet_chol: factorization failed");
  }
  const auto diag = llt.matrixLLT().diagonal();
  if ((diag.array() <= Scalar(0)).any()) {
    throw Error(ErrorCode::kNotPositiveDefinite, "logdet_chol: nonpositive pivot");
  }
  return Scalar(2) * diag.array().log().sum();
}

template <typename Derived>
bool is_positive_definite(const Eigen::MatrixBase<Derived>& M) {
  Eigen::LLT<MatrixX<typename Derived::Scalar>> llt(M.eval());
  return llt.info() == Eigen::Success;
}

/// Inverse of a symmetric positive definite matrix.
template <typename Derived>
MatrixX<typename Derived::Scalar> spd_inverse(const Eigen::MatrixBase<Derived>& M) {
  using Scalar = typename Derived::Scalar;
  Eigen::LLT<MatrixX<Scalar>> llt(M.eval());
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotPositiveDefinite, "spd_inverse: matrix not positive definite");
  }
  return symmetrize(llt.solve(MatrixX<Scalar>::Identity(M.rows(), M.cols())));
}

struct LyapunovOptions {
  double residual_tol = 1e-10;  // relative to max(1, ‖Q‖_F)
  int max_iterations = 10000;   // total doubling steps across refinement passes
  double stability_margin = 1e-9;
};

template <typename Scalar>
Scalar lyapunov_residual(const MatrixX<Scalar>& F, const MatrixX<Scalar>& Q,
                         const MatrixX<Scalar>& P) {
  return (P - F * P * F.transpose() - Q).norm();
}

/// Solves P = F P Fᵀ + Q for Schur-stable F, starting from `initial`.
///
/// Smith doubling on the correction equation Δ = F Δ Fᵀ + R with
/// R = F X Fᵀ + Q - X, followed by refinement passes until the residual
/// ‖P - F P Fᵀ - Q‖_F falls below residual_tol · max(1, ‖Q‖_F).
template <typename DerivedF, typename DerivedQ, typename DerivedX>
MatrixX<typename DerivedF::Scalar> solve_discrete_lyapunov(
    const Eigen::MatrixBase<DerivedF>& F_in, const Eigen::MatrixBase<DerivedQ>& Q_in,
    const Eigen::MatrixBase<DerivedX>& initial, const LyapunovOptions& opts = {}) {
  using Scalar = typename DerivedF::Scalar;
  require_square(F_in, "solve_discrete_lyapunov");
  require_square(Q_in, "solve_discrete_lyapunov");
  if (F_in.rows() != Q_in.rows() || initial.rows() != F_in.rows() ||
      initial.cols() != F_in.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "solve_discrete_lyapunov: dimension mismatch");
  }
  if (!is_symmetric(Q_in, Scalar(1e-10))) {
    throw Error(ErrorCode::kInvalidArgument, "solve_discrete_lyapunov: Q not symmetric");
  }
  const MatrixX<Scalar> F = F_in;
  const MatrixX<Scalar> Q = symmetrize(Q_in);
  const Scalar rho = spectral_radius(F);
  if (rho >= Scalar(1) - Scalar(opts.stability_margin)) {
    throw Error(ErrorCode::kNotSchurStable,
                "spectral radius " + std::to_string(double(rho)) + " >= 1");
  }

  const Scalar target = Scalar(opts.residual_tol) * std::max<Scalar>(Scalar(1), Q.norm());
  MatrixX<Scalar> P = symmetrize(initial);
  int iterations = 0;
  while (iterations < opts.max_iterations) {
    MatrixX<Scalar> delta = symmetrize(F * P * F.transpose() + Q - P);
    if (delta.norm() <= target) return P;
    MatrixX<Scalar> Fk = F;
    // Stop squaring once the next term cannot change delta in floating point.
    while (iterations < opts.max_iterations) {
      ++iterations;
      const MatrixX<Scalar> term = Fk * delta * Fk.transpose();
      delta += term;
      if (term.norm() <= std::numeric_limits<Scalar>::epsilon() * delta.norm()) break;
      Fk = (Fk * Fk).eval();
    }
    P = symmetrize(P + delta);
  }
  if (lyapunov_residual<Scalar>(F, Q, P) <= target) return P;
  throw Error(ErrorCode::kNonConvergence, "solve_discrete_lyapunov: residual target unmet");
}

template <typename DerivedF, typename DerivedQ>
MatrixX<typename DerivedF::Scalar> solve_discrete_lyapunov(
    const Eigen::MatrixBase<DerivedF>& F, const Eigen::MatrixBase<DerivedQ>& Q,
    const LyapunovOptions& opts = {}) {
  using Scalar = typename DerivedF::Scalar;
  return solve_discrete_lyapunov(F, Q, MatrixX<Scalar>::Zero(F.rows(), F.cols()), opts);
}

}  // namespace crdw
