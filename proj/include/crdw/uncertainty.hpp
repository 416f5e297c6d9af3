#pragma once

#include <optional>
#include <vector>

#include "crdw/numerics.hpp"
#include "crdw/plant.hpp"
#include "crdw/rng.hpp"
#include "crdw/schedule.hpp"

namespace crdw {

/// Point of the probability simplex weighting the polytope vertices.
class Theta {
 public:
  /// Throws InvalidArgument unless entries are ≥ 0 and sum to 1 within 1e-12.
  explicit Theta(Vector weights);

  static Theta barycenter(Eigen::Index d);
  static Theta vertex(Eigen::Index d, Eigen::Index k);
  /// Uniform draw on the simplex (flat Dirichlet).
  static Theta sample(Eigen::Index d, RngStream& rng);

  const Vector& weights() const { return weights_; }
  Eigen::Index size() const { return weights_.size(); }
  double operator[](Eigen::Index k) const { return weights_(k); }

 private:
  Vector weights_;
};

/// Convex hull Ω^Z of measurement-noise covariances, together with the
/// steady-state observer-error covariance Σ̄_{δ,k} and ψ covariance
/// Σ̄_k = blkdiag(C Σ̄_{δ,k} Cᵀ + Σ_{z,k}, Σ_E) at every vertex.
class NoisePolytope {
 public:
  NoisePolytope(std::vector<Matrix> vertices, const SystemModel& model);

  Eigen::Index num_vertices() const { return static_cast<Eigen::Index>(vertices_.size()); }
  Eigen::Index output_dim() const { return output_dim_; }
  Eigen::Index psi_dim() const { return output_dim_ + input_dim_; }

  const std::vector<Matrix>& vertices() const { return vertices_; }
  const std::vector<Matrix>& sigma_delta_bar() const { return sigma_delta_bar_; }
  const std::vector<Matrix>& sigma_bar() const { return sigma_bar_; }
  const Matrix& sigma_e() const { return sigma_e_; }

  Matrix sigma_z(const Theta& theta) const;
  /// Σ_k θ_k Σ̄_k.
  Matrix sigma_bar(const Theta& theta) const;

 private:
  void check_theta(const Theta& theta) const;

  Eigen::Index output_dim_ = 0;
  Eigen::Index input_dim_ = 0;
  Matrix sigma_e_;
  std::vector<Matrix> vertices_;
  std::vector<Matrix> sigma_delta_bar_;
  std::vector<Matrix> sigma_bar_;
};

NoisePolytope build_polytope(std::vector<Matrix> vertices, const SystemModel& model);

/// Σ_k θ_k Σ̄_{δ,k}; equals the Lyapunov solution for Σ_Z(θ).
Matrix sigma_delta_of_theta(const NoisePolytope& poly, const Theta& theta);

/// Steady-state observer-error covariance for a given measurement covariance.
Matrix steady_state_sigma_delta(const SystemModel& model, const Matrix& sigma_z);

enum class EpsilonNorm {
  /// Spectral norm in the model's own coordinates; needs ‖A+LC‖₂ < 1.
  kTwoNorm,
  /// Spectral norm after the state change x ↦ P^{1/2} x with
  /// (A+LC)ᵀ P (A+LC) - P = -I, under which the observer matrix is always
  /// contractive. Output statistics are coordinate independent, so the
  /// bound carries over unchanged.
  kLyapunovWeighted,
};

/// Spectral slack ε = ξ ‖C‖² ‖L‖² ‖A+LC‖² / (1 - ‖A+LC‖²)² covering the
/// transient drift of C Σ_Δ Cᵀ + Σ_Z when the noise covariance moves by at
/// most ξ (spectral norm) per step.
double epsilon_bound(double xi, const SystemModel& model, EpsilonNorm norm = EpsilonNorm::kTwoNorm);

/// Scalar form used by epsilon_bound, exposed for direct checks.
double epsilon_from_norms(double xi, double c_norm, double l_norm, double f_norm);

struct MembershipResult {
  Theta theta;
  double residual;  // ‖Σ_k θ_k Σ_{z,k} - target‖_F
  bool inside;
};

/// Least squares over the simplex: finds θ minimizing ‖Σ_Z(θ) - target‖_F
/// and reports membership at tolerance `tol` (relative to ‖target‖_F).
MembershipResult polytope_membership(const NoisePolytope& poly, const Matrix& target,
                                     double tol = 1e-8);

/// Euclidean projection onto the probability simplex.
Vector project_to_simplex(const Vector& v);

}  // namespace crdw
