#pragma once

// Watermarked closed-loop LTI plant with Luenberger observer and the
// sensor attack v_n = α(C x_n + z_n) + C η_n + ζ_n.

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "crdw/numerics.hpp"
#include "crdw/rng.hpp"
#include "crdw/schedule.hpp"

namespace crdw {

/// Plant, controller and observer matrices plus nominal noise covariances.
/// Control law u = K x̂ + e; observer x̂⁺ = A x̂ + B u + L (C x̂ - y).
/// The constructor rejects inconsistent dimensions, non-PSD covariances and
/// gains for which A+BK or A+LC is not Schur stable.
class SystemModel {
 public:
  SystemModel(Matrix A, Matrix B, Matrix C, Matrix K, Matrix L, Matrix sigma_w, Matrix sigma_e);

  const Matrix& A() const { return A_; }
  const Matrix& B() const { return B_; }
  const Matrix& C() const { return C_; }
  const Matrix& K() const { return K_; }
  const Matrix& L() const { return L_; }
  const Matrix& sigma_w() const { return sigma_w_; }
  const Matrix& sigma_e() const { return sigma_e_; }

  Eigen::Index state_dim() const { return A_.rows(); }
  Eigen::Index input_dim() const { return B_.cols(); }
  Eigen::Index output_dim() const { return C_.rows(); }

  Matrix closed_loop() const { return A_ + B_ * K_; }
  Matrix observer_dynamics() const { return A_ + L_ * C_; }

 private:
  Matrix A_, B_, C_, K_, L_, sigma_w_, sigma_e_;
};

struct AttackSpec {
  double alpha = 0.0;
  Matrix sigma_o;  // p×p, covariance of the attacker's state noise ω
  Matrix sigma_s;  // m×m, covariance of the injected noise ζ
  Vector eta0;     // p

  void validate(const SystemModel& model) const;
};

struct SimState {
  Vector x;
  Vector xhat;
  Vector eta;
  long step = 0;
  /// Most recent watermark draws, newest at the back; holds k'+2 entries
  /// once warmed up.
  std::deque<Vector> watermark_history;
};

struct StepRecord {
  long step = 0;
  Vector y;
  Vector residual;  // C x̂_n - y_n
  Vector u;
  std::optional<Vector> watermark_lagged;  // e_{n-k'-1}
  std::optional<Vector> psi;               // [residual; e_{n-k'-1}]
};

/// One step's worth of exogenous draws. Attack draws are ignored when there
/// is no attack.
struct StepNoise {
  Vector w, z, e, zeta, omega;
};

/// Main stream drives w, z, e; attacker stream drives ζ, ω. Keeping them
/// separate gives attacked and unattacked runs with one seed identical
/// w/z/e realizations.
struct PlantRng {
  explicit PlantRng(std::uint64_t seed) : main(seed, 0), attacker(main.substream(1)) {}
  RngStream main;
  RngStream attacker;
};

/// Smallest k ≥ 1 with C (A+BK)^k B ≠ 0 (max-abs entry > 1e-10), searching
/// k ≤ p. Throws NoInputCoupling otherwise.
int compute_kprime(const SystemModel& model);

/// Discrete LQR gain for u = K x (note the sign: A + B K is stable).
Matrix dlqr_gain(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R);
/// Observer gain L for x̂⁺ = ... + L (C x̂ - y), the dual of dlqr_gain.
Matrix dlqe_gain(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R);

SimState initial_state(const SystemModel& model, const std::optional<AttackSpec>& attack);

StepNoise draw_noise(const SystemModel& model, const std::optional<AttackSpec>& attack,
                     const Matrix& sigma_z_now, PlantRng& rng);

/// Deterministic transition given explicit noise. Returns the record for
/// step `state.step` and advances `state` in place.
StepRecord advance(SimState& state, const SystemModel& model,
                   const std::optional<AttackSpec>& attack, const StepNoise& noise, int kprime);

StepRecord step(SimState& state, const SystemModel& model, const std::optional<AttackSpec>& attack,
                const Matrix& sigma_z_now, PlantRng& rng, int kprime);

std::vector<StepRecord> simulate(const SystemModel& model, const std::optional<AttackSpec>& attack,
                                 const CovarianceSchedule& schedule, long n_steps,
                                 std::uint64_t seed);

}  // namespace crdw
