#include "crdw/plant.hpp"

#include <string>

namespace crdw {
namespace {

void require_psd(const Matrix& M, Eigen::Index n, const char* name) {
  if (M.rows() != n || M.cols() != n) {
    throw Error(ErrorCode::kInvalidArgument, std::string(name) + " has wrong dimensions");
  }
  if (!is_symmetric(M, 1e-12)) {
    throw Error(ErrorCode::kInvalidArgument, std::string(name) + " is not symmetric");
  }
  if (n > 0 && min_eigenvalue(M) < -1e-12 * std::max(1.0, M.norm())) {
    throw Error(ErrorCode::kNotPsd, std::string(name) + " is not PSD");
  }
}

void require_stable(const Matrix& F, const char* name) {
  const double rho = spectral_radius(F);
  if (rho >= 1.0) {
    throw Error(ErrorCode::kNotSchurStable,
                std::string(name) + " has spectral radius " + std::to_string(rho));
  }
}

// Riccati value iteration P ← AᵀPA - AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q.
Matrix solve_dare(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R) {
  Matrix P = Q;
  for (int it = 0; it < 1'000'000; ++it) {
    const Matrix BtP = B.transpose() * P;
    const Matrix G = (R + BtP * B).ldlt().solve(BtP * A);
    const Matrix next = symmetrize(A.transpose() * P * A - A.transpose() * P * B * G + Q);
    const double change = (next - P).norm();
    P = next;
    if (change <= 1e-13 * std::max(1.0, P.norm())) return P;
  }
  throw Error(ErrorCode::kNonConvergence, "Riccati iteration did not converge");
}

}  // namespace

SystemModel::SystemModel(Matrix A, Matrix B, Matrix C, Matrix K, Matrix L, Matrix sigma_w,
                         Matrix sigma_e)
    : A_(std::move(A)),
      B_(std::move(B)),
      C_(std::move(C)),
      K_(std::move(K)),
      L_(std::move(L)),
      sigma_w_(std::move(sigma_w)),
      sigma_e_(std::move(sigma_e)) {
  const Eigen::Index p = A_.rows();
  const Eigen::Index q = B_.cols();
  const Eigen::Index m = C_.rows();
  if (p == 0 || A_.cols() != p) throw Error(ErrorCode::kInvalidArgument, "A must be square and nonempty");
  if (B_.rows() != p || q == 0) throw Error(ErrorCode::kInvalidArgument, "B must be p×q with q ≥ 1");
  if (C_.cols() != p || m == 0) throw Error(ErrorCode::kInvalidArgument, "C must be m×p with m ≥ 1");
  if (K_.rows() != q || K_.cols() != p) throw Error(ErrorCode::kInvalidArgument, "K must be q×p");
  if (L_.rows() != p || L_.cols() != m) throw Error(ErrorCode::kInvalidArgument, "L must be p×m");
  require_psd(sigma_w_, p, "sigma_w");
  require_psd(sigma_e_, q, "sigma_e");
  require_stable(closed_loop(), "A+BK");
  require_stable(observer_dynamics(), "A+LC");
}

void AttackSpec::validate(const SystemModel& model) const {
  require_psd(sigma_o, model.state_dim(), "attack sigma_o");
  require_psd(sigma_s, model.output_dim(), "attack sigma_s");
  if (eta0.size() != model.state_dim()) {
    throw Error(ErrorCode::kInvalidArgument, "attack eta0 must have the state dimension");
  }
}

int compute_kprime(const SystemModel& model) {
  const Matrix F = model.closed_loop();
  Matrix power = F;
  for (Eigen::Index k = 1; k <= model.state_dim(); ++k) {
    if ((model.C() * power * model.B()).cwiseAbs().maxCoeff() > 1e-10) return static_cast<int>(k);
    power = (power * F).eval();
  }
  throw Error(ErrorCode::kNoInputCoupling, "C (A+BK)^k B vanishes for every k ≤ p");
}

Matrix dlqr_gain(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R) {
  const Matrix P = solve_dare(A, B, Q, R);
  const Matrix BtP = B.transpose() * P;
  return -(R + BtP * B).ldlt().solve(BtP * A);
}

Matrix dlqe_gain(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R) {
  // A + L C = (Aᵀ + Cᵀ Lᵀ)ᵀ, so Lᵀ is the LQR gain of the dual pair.
  return dlqr_gain(A.transpose(), C.transpose(), Q, R).transpose();
}

SimState initial_state(const SystemModel& model, const std::optional<AttackSpec>& attack) {
  SimState s;
  s.x = Vector::Zero(model.state_dim());
  s.xhat = Vector::Zero(model.state_dim());
  s.eta = attack ? attack->eta0 : Vector::Zero(model.state_dim());
  return s;
}

StepNoise draw_noise(const SystemModel& model, const std::optional<AttackSpec>& attack,
                     const Matrix& sigma_z_now, PlantRng& rng) {
  StepNoise n;
  n.w = sample_gaussian(rng.main, model.sigma_w());
  n.z = sample_gaussian(rng.main, sigma_z_now);
  n.e = sample_gaussian(rng.main, model.sigma_e());
  if (attack) {
    n.zeta = sample_gaussian(rng.attacker, attack->sigma_s);
    n.omega = sample_gaussian(rng.attacker, attack->sigma_o);
  }
  return n;
}

StepRecord advance(SimState& state, const SystemModel& model,
                   const std::optional<AttackSpec>& attack, const StepNoise& noise, int kprime) {
  const Matrix& A = model.A();
  const Matrix& B = model.B();
  const Matrix& C = model.C();

  StepRecord rec;
  rec.step = state.step;

  const Vector true_output = C * state.x + noise.z;
  Vector v = Vector::Zero(model.output_dim());
  if (attack) {
    // α = -1 with zero attacker noise cancels the true output exactly.
    v = attack->alpha * true_output + C * state.eta + noise.zeta;
    state.eta = model.closed_loop() * state.eta + noise.omega;
  }
  rec.y = true_output + v;
  rec.residual = C * state.xhat - rec.y;
  rec.u = model.K() * state.xhat + noise.e;

  state.watermark_history.push_back(noise.e);
  const std::size_t depth = static_cast<std::size_t>(kprime) + 2;
  while (state.watermark_history.size() > depth) state.watermark_history.pop_front();
  if (state.watermark_history.size() == depth) {
    rec.watermark_lagged = state.watermark_history.front();
    Vector psi(rec.residual.size() + rec.watermark_lagged->size());
    psi << rec.residual, *rec.watermark_lagged;
    rec.psi = std::move(psi);
  }

  const Vector x_next = A * state.x + B * rec.u + noise.w;
  const Vector xhat_next = A * state.xhat + B * rec.u + model.L() * rec.residual;
  state.x = x_next;
  state.xhat = xhat_next;
  ++state.step;
  return rec;
}

StepRecord step(SimState& state, const SystemModel& model, const std::optional<AttackSpec>& attack,
                const Matrix& sigma_z_now, PlantRng& rng, int kprime) {
  return advance(state, model, attack, draw_noise(model, attack, sigma_z_now, rng), kprime);
}

std::vector<StepRecord> simulate(const SystemModel& model, const std::optional<AttackSpec>& attack,
                                 const CovarianceSchedule& schedule, long n_steps,
                                 std::uint64_t seed) {
  if (n_steps < 1) throw Error(ErrorCode::kInvalidArgument, "n_steps must be at least 1");
  if (schedule.dim() != model.output_dim()) {
    throw Error(ErrorCode::kInvalidArgument, "schedule dimension does not match the output dimension");
  }
  if (attack) attack->validate(model);
  const int kprime = compute_kprime(model);

  // Factor each covariance once; the measurement factor only when Σ_Z moves.
  const Matrix fw = psd_factor(model.sigma_w());
  const Matrix fe = psd_factor(model.sigma_e());
  Matrix fs, fo;
  if (attack) {
    fs = psd_factor(attack->sigma_s);
    fo = psd_factor(attack->sigma_o);
  }
  Matrix sigma_z = schedule.at(0);
  Matrix fz = psd_factor(sigma_z);

  PlantRng rng(seed);
  SimState state = initial_state(model, attack);
  std::vector<StepRecord> records;
  records.reserve(static_cast<std::size_t>(n_steps));
  for (long n = 0; n < n_steps; ++n) {
    Matrix next = schedule.at(n);
    if (next != sigma_z) {
      sigma_z = std::move(next);
      fz = psd_factor(sigma_z);
    }
    StepNoise noise;
    noise.w = sample_gaussian(rng.main, fw, true);
    noise.z = sample_gaussian(rng.main, fz, true);
    noise.e = sample_gaussian(rng.main, fe, true);
    if (attack) {
      noise.zeta = sample_gaussian(rng.attacker, fs, true);
      noise.omega = sample_gaussian(rng.attacker, fo, true);
    }
    records.push_back(advance(state, model, attack, noise, kprime));
  }
  return records;
}

}  // namespace crdw
