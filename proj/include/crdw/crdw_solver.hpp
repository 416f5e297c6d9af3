#pragma once

// Convex relaxation of the covariance-robust likelihood-ratio statistic:
//
//   minimize    (n+1-ℓ) log det S + tr(V S) - ℓ log det V
//   subject to  Σ_k θ_k U_k ⪰ V                       (upper bound)
//               [[V, I], [I, εI + Σ_k θ_k Σ̄_k]] ⪰ 0    (lower bound)
//               1ᵀθ = 1,  θ ≥ 0
//
// with U_k = (Σ̄_k - εI)⁻¹. With ε = 0 this is the fixed-covariance statistic,
// with ε > 0 the drift-robust one.

#include <optional>
#include <string>
#include <vector>

#include "crdw/detect.hpp"
#include "crdw/numerics.hpp"
#include "crdw/uncertainty.hpp"

namespace crdw {

struct CrdwProblem {
  std::vector<Matrix> sigma_bar;  // Σ̄_k, all n×n positive definite
  double epsilon = 0.0;
  /// Matrices U_k of the upper-bound constraint. Empty means the constraint
  /// is absent.
  std::vector<Matrix> upper;
  /// True when the upper bound uses the standard (Σ̄_k - εI)⁻¹ vertices.
  bool standard_upper = true;
  /// Human-readable note when a fallback was applied.
  std::string note;

  Eigen::Index dim() const { return sigma_bar.empty() ? 0 : sigma_bar.front().rows(); }
  Eigen::Index num_vertices() const { return static_cast<Eigen::Index>(sigma_bar.size()); }
};

/// Builds the problem from raw vertex matrices. If some Σ̄_k - εI is not
/// positive definite and `fallback_vertices` is given (and all positive
/// definite), the upper bound uses their inverses instead; otherwise it is
/// dropped.
CrdwProblem make_crdw_problem(std::vector<Matrix> sigma_bar, double epsilon,
                              const std::vector<Matrix>* fallback_vertices = nullptr);

/// Problem over a noise polytope. The fallback vertices are
/// blkdiag(Σ_{z,k}, Σ_E), which bound the ψ covariance from below.
CrdwProblem make_crdw_problem(const NoisePolytope& poly, double epsilon);

enum class SolverStatus { kOptimal, kMaxIter, kInfeasible };

std::string_view to_string(SolverStatus status);

struct SolverOptions {
  /// Target for the certified relative suboptimality (duality gap).
  double gap_tol = 1e-8;
  double barrier_growth = 20.0;
  int max_newton_iterations = 2000;
};

struct SolverResult {
  double objective = 0.0;
  Matrix V_opt;
  Theta theta_opt = Theta::barycenter(1);
  /// Relative KKT residual: certified suboptimality bound plus residual
  /// Newton decrement, divided by max(1, |reduced objective|).
  double kkt_residual = 0.0;
  /// Largest negative eigenvalue magnitude over the LMIs, in the solver's
  /// normalized coordinates.
  double constraint_violation = 0.0;
  int iterations = 0;
  SolverStatus status = SolverStatus::kMaxIter;
};

SolverResult solve_crdw(const WindowStat& window, const CrdwProblem& problem,
                        const SolverOptions& options = {});

SolverResult solve_crdw(const WindowStat& window, const NoisePolytope& poly, double epsilon,
                        const SolverOptions& options = {});

/// Largest violation of the problem's constraints at (V, θ), measured as the
/// most negative eigenvalue of each LMI (0 when feasible).
double crdw_constraint_violation(const CrdwProblem& problem, const Matrix& V, const Theta& theta);

}  // namespace crdw
