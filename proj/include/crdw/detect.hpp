#pragma once

#include <span>
#include <utility>
#include <vector>

#include "crdw/numerics.hpp"
#include "crdw/plant.hpp"

namespace crdw {

/// Scatter matrix S_n = Σ_{i=n+1}^{n+ℓ} ψ_i ψ_iᵀ of one window.
struct WindowStat {
  Matrix S;
  long ell = 0;
  long start_step = 0;

  Eigen::Index dim() const { return S.rows(); }
};

/// Sums ψ_i ψ_iᵀ over steps start+1 .. start+ell. Throws InsufficientData if
/// any of those steps is missing or has no ψ.
WindowStat accumulate_window(std::span<const StepRecord> records, long start, long ell);

/// Same sum over an explicit list of ψ vectors (window start 0).
WindowStat window_from_psi(std::span<const Vector> psi);

/// Wishart negative log-likelihood (n+1-ℓ) log det S + tr(V S) - ℓ log det V,
/// n = dim S.
double wishart_nll(const WindowStat& window, const Matrix& V);

/// Unconstrained minimum of wishart_nll over V ≻ 0, attained at V = ℓ S⁻¹.
double wishart_nll_min(const WindowStat& window);

/// Nonrobust statistic: (n+1-ℓ) log det S + tr(blkdiag((C Σ_Δ Cᵀ + Σ_Z)⁻¹, Σ_E⁻¹) S).
/// The -ℓ log det V term is left out, as in the original formulation.
double dw_statistic(const WindowStat& window, const Matrix& C, const Matrix& sigma_delta,
                    const Matrix& sigma_z, const Matrix& sigma_e);

struct DetectionResult {
  double statistic = 0.0;
  double threshold = 0.0;
  bool reject = false;
};

/// Rejects H0 iff statistic > nu; equality accepts.
DetectionResult decide(double statistic, double nu);

struct MomentDiagnostics {
  Matrix residual_cov;         // (1/N) Σ r rᵀ
  Matrix residual_watermark;   // (1/N) Σ r e_{n-k'-1}ᵀ
  long count = 0;
};

/// Finite-sample averages of r rᵀ and r e_{n-k'-1}ᵀ over steps ≥ burn_in that
/// carry ψ. Needs at least 2·burn_in records.
MomentDiagnostics moment_diagnostics(std::span<const StepRecord> records, long burn_in);

/// Empirical quantile with linear interpolation between order statistics.
double empirical_quantile(std::vector<double> values, double prob);

/// Probability that a random attacked value exceeds a random unattacked one
/// (ties count one half).
double auroc(std::span<const double> unattacked, std::span<const double> attacked);

}  // namespace crdw
