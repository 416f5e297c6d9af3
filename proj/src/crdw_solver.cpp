#include "crdw/crdw_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace crdw {

std::string_view to_string(SolverStatus status) {
  switch (status) {
    case SolverStatus::kOptimal: return "Optimal";
    case SolverStatus::kMaxIter: return "MaxIter";
    case SolverStatus::kInfeasible: return "Infeasible";
  }
  return "Unknown";
}

CrdwProblem make_crdw_problem(std::vector<Matrix> sigma_bar, double epsilon,
                              const std::vector<Matrix>* fallback_vertices) {
  if (sigma_bar.empty()) throw Error(ErrorCode::kInvalidArgument, "problem needs at least one vertex");
  if (!(epsilon >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "epsilon must be nonnegative");
  const Eigen::Index n = sigma_bar.front().rows();
  for (const Matrix& s : sigma_bar) {
    if (s.rows() != n || s.cols() != n) throw Error(ErrorCode::kInvalidArgument, "vertex dimensions differ");
    if (!is_positive_definite(s)) throw Error(ErrorCode::kNotPositiveDefinite, "vertex covariance not positive definite");
  }

  CrdwProblem problem;
  problem.epsilon = epsilon;
  const Matrix eps_eye = epsilon * Matrix::Identity(n, n);
  bool standard_ok = true;
  for (const Matrix& s : sigma_bar) {
    if (!is_positive_definite(Matrix(s - eps_eye))) standard_ok = false;
  }
  if (standard_ok) {
    for (const Matrix& s : sigma_bar) problem.upper.push_back(spd_inverse(Matrix(s - eps_eye)));
  } else {
    problem.standard_upper = false;
    bool fallback_ok = fallback_vertices != nullptr && fallback_vertices->size() == sigma_bar.size();
    if (fallback_ok) {
      for (const Matrix& f : *fallback_vertices) {
        if (f.rows() != n || !is_positive_definite(f)) fallback_ok = false;
      }
    }
    if (fallback_ok) {
      for (const Matrix& f : *fallback_vertices) problem.upper.push_back(spd_inverse(f));
      problem.note = "some vertex minus epsilon*I is not positive definite; upper bound uses fallback vertices";
    } else {
      problem.note = "some vertex minus epsilon*I is not positive definite and no usable fallback; upper bound dropped";
    }
  }
  problem.sigma_bar = std::move(sigma_bar);
  return problem;
}

CrdwProblem make_crdw_problem(const NoisePolytope& poly, double epsilon) {
  std::vector<Matrix> fallback;
  for (const Matrix& v : poly.vertices()) fallback.push_back(blkdiag(v, poly.sigma_e()));
  return make_crdw_problem(poly.sigma_bar(), epsilon, &fallback);
}

namespace {

Matrix weighted_sum(const std::vector<Matrix>& mats, const Vector& theta) {
  Matrix out = Matrix::Zero(mats.front().rows(), mats.front().cols());
  for (std::size_t k = 0; k < mats.size(); ++k) out += theta(static_cast<Eigen::Index>(k)) * mats[k];
  return out;
}

Matrix select(const Matrix& M, const std::vector<Eigen::Index>& rows, const std::vector<Eigen::Index>& cols) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = M(rows[i], cols[j]);
  }
  return out;
}

// Indices whose rows agree across every vertex and that are decoupled from
// the remaining indices. With ε = 0 and the standard upper bound the upper and
// lower bounds coincide on this block, which pins V there.
std::vector<bool> pinned_indices(const CrdwProblem& problem) {
  const Eigen::Index n = problem.dim();
  std::vector<bool> pinned(static_cast<std::size_t>(n), false);
  if (problem.epsilon != 0.0 || !problem.standard_upper || problem.upper.empty()) return pinned;
  const Matrix& first = problem.sigma_bar.front();
  const double tol = 1e-14 * first.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < n; ++i) {
    bool same = true;
    for (const Matrix& s : problem.sigma_bar) {
      if ((s.row(i) - first.row(i)).cwiseAbs().maxCoeff() > tol) same = false;
    }
    pinned[static_cast<std::size_t>(i)] = same;
  }
  bool changed = true;
  while (changed) {
    changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!pinned[static_cast<std::size_t>(i)]) continue;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!pinned[static_cast<std::size_t>(j)] && std::abs(first(i, j)) > tol) {
          pinned[static_cast<std::size_t>(i)] = false;
          changed = true;
          break;
        }
      }
    }
  }
  return pinned;
}

// G(z) = base + Σ_i z_i coeff[i]; an empty coefficient stands for zero.
struct AffineMatrix {
  Matrix base;
  std::vector<Matrix> coeff;

  Matrix eval(const Vector& z) const {
    Matrix out = base;
    for (std::size_t i = 0; i < coeff.size(); ++i) {
      if (coeff[i].size() != 0) out += z(static_cast<Eigen::Index>(i)) * coeff[i];
    }
    return out;
  }
};

// Adds c·(-log det G(z)) and its derivatives. Returns false if G(z) is not
// positive definite.
bool add_neg_logdet(const AffineMatrix& G, const Vector& z, double c, double& value, Vector* grad,
                    Matrix* hess) {
  const Matrix Gz = G.eval(z);
  Eigen::LLT<Matrix> llt(Gz);
  if (llt.info() != Eigen::Success) return false;
  const auto diag = llt.matrixLLT().diagonal();
  if ((diag.array() <= 0.0).any()) return false;
  value += -c * 2.0 * diag.array().log().sum();
  if (grad == nullptr) return true;

  const Matrix Ginv = llt.solve(Matrix::Identity(Gz.rows(), Gz.cols()));
  const auto nvar = static_cast<Eigen::Index>(G.coeff.size());
  std::vector<Matrix> prod(G.coeff.size());
  for (Eigen::Index i = 0; i < nvar; ++i) {
    const Matrix& Gi = G.coeff[static_cast<std::size_t>(i)];
    if (Gi.size() == 0) continue;
    prod[static_cast<std::size_t>(i)] = Ginv * Gi;
    (*grad)(i) += -c * prod[static_cast<std::size_t>(i)].trace();
  }
  for (Eigen::Index i = 0; i < nvar; ++i) {
    const Matrix& Pi = prod[static_cast<std::size_t>(i)];
    if (Pi.size() == 0) continue;
    for (Eigen::Index j = i; j < nvar; ++j) {
      const Matrix& Pj = prod[static_cast<std::size_t>(j)];
      if (Pj.size() == 0) continue;
      // tr(Pi Pj) = Σ_ab Pi(a,b) Pj(b,a)
      const double h = c * Pi.cwiseProduct(Pj.transpose()).sum();
      (*hess)(i, j) += h;
      if (j != i) (*hess)(j, i) += h;
    }
  }
  return true;
}

// Barrier formulation of the reduced problem in normalized coordinates.
class BarrierProblem {
 public:
  BarrierProblem(Matrix S, std::vector<Matrix> lower, std::vector<Matrix> upper, double ell)
      : r_(S.rows()),
        d_(static_cast<Eigen::Index>(lower.size())),
        nw_(r_ * (r_ + 1) / 2),
        nvar_(nw_ + d_ - 1),
        S_(std::move(S)),
        lower_(std::move(lower)),
        upper_(std::move(upper)),
        ell_(ell) {
    const auto nv = static_cast<std::size_t>(nvar_);
    // Symmetric basis E_ij for W.
    for (Eigen::Index j = 0; j < r_; ++j) {
      for (Eigen::Index i = j; i < r_; ++i) {
        Matrix E = Matrix::Zero(r_, r_);
        E(i, j) = 1.0;
        E(j, i) = 1.0;
        basis_.push_back(E);
        linear_.push_back(i == j ? S_(i, i) : 2.0 * S_(i, j));
      }
    }

    W_.base = Matrix::Zero(r_, r_);
    W_.coeff.resize(nv);
    for (Eigen::Index i = 0; i < nw_; ++i) W_.coeff[static_cast<std::size_t>(i)] = basis_[static_cast<std::size_t>(i)];

    const Matrix& last_lower = lower_.back();
    G2_.base = Matrix::Zero(2 * r_, 2 * r_);
    G2_.base.topRightCorner(r_, r_).setIdentity();
    G2_.base.bottomLeftCorner(r_, r_).setIdentity();
    G2_.base.bottomRightCorner(r_, r_) = last_lower;
    G2_.coeff.resize(nv);
    for (Eigen::Index i = 0; i < nw_; ++i) {
      Matrix C = Matrix::Zero(2 * r_, 2 * r_);
      C.topLeftCorner(r_, r_) = basis_[static_cast<std::size_t>(i)];
      G2_.coeff[static_cast<std::size_t>(i)] = C;
    }
    for (Eigen::Index k = 0; k + 1 < d_; ++k) {
      Matrix C = Matrix::Zero(2 * r_, 2 * r_);
      C.bottomRightCorner(r_, r_) = lower_[static_cast<std::size_t>(k)] - last_lower;
      G2_.coeff[static_cast<std::size_t>(nw_ + k)] = C;
    }

    if (!upper_.empty()) {
      const Matrix& last_upper = upper_.back();
      G1_.base = last_upper;
      G1_.coeff.resize(nv);
      for (Eigen::Index i = 0; i < nw_; ++i) G1_.coeff[static_cast<std::size_t>(i)] = -basis_[static_cast<std::size_t>(i)];
      for (Eigen::Index k = 0; k + 1 < d_; ++k) {
        G1_.coeff[static_cast<std::size_t>(nw_ + k)] = upper_[static_cast<std::size_t>(k)] - last_upper;
      }
    }
  }

  Eigen::Index num_vars() const { return nvar_; }
  double barrier_parameter() const {
    return static_cast<double>((upper_.empty() ? 0 : r_) + 2 * r_ + (d_ > 1 ? d_ : 0));
  }

  Matrix unpack_W(const Vector& z) const { return W_.eval(z); }

  Vector unpack_theta(const Vector& z) const {
    Vector theta(d_);
    for (Eigen::Index k = 0; k + 1 < d_; ++k) theta(k) = z(nw_ + k);
    theta(d_ - 1) = 1.0 - (d_ > 1 ? z.segment(nw_, d_ - 1).sum() : 0.0);
    return theta;
  }

  Matrix lower_sum(const Vector& theta) const { return weighted_sum(lower_, theta); }
  Matrix upper_sum(const Vector& theta) const { return weighted_sum(upper_, theta); }
  bool has_upper() const { return !upper_.empty(); }

  /// tr(W S) - ℓ log det W, or +inf outside the domain.
  double objective(const Vector& z) const {
    double value = 0.0;
    for (Eigen::Index i = 0; i < nw_; ++i) value += linear_[static_cast<std::size_t>(i)] * z(i);
    if (!add_neg_logdet(W_, z, ell_, value, nullptr, nullptr)) return std::numeric_limits<double>::infinity();
    return value;
  }

  /// Barrier function t·f + barriers; fills gradient/Hessian when requested.
  /// Returns +inf outside the strict interior.
  double evaluate(const Vector& z, double t, Vector* grad, Matrix* hess) const {
    const double inf = std::numeric_limits<double>::infinity();
    if (grad != nullptr) {
      grad->setZero(nvar_);
      hess->setZero(nvar_, nvar_);
    }
    double value = 0.0;
    for (Eigen::Index i = 0; i < nw_; ++i) {
      value += t * linear_[static_cast<std::size_t>(i)] * z(i);
      if (grad != nullptr) (*grad)(i) += t * linear_[static_cast<std::size_t>(i)];
    }
    if (d_ > 1) {
      const Vector theta = unpack_theta(z);
      if ((theta.array() <= 0.0).any()) return inf;
      value -= theta.array().log().sum();
      if (grad != nullptr) {
        const double last = theta(d_ - 1);
        for (Eigen::Index k = 0; k + 1 < d_; ++k) {
          (*grad)(nw_ + k) += -1.0 / theta(k) + 1.0 / last;
          (*hess)(nw_ + k, nw_ + k) += 1.0 / (theta(k) * theta(k));
        }
        hess->bottomRightCorner(d_ - 1, d_ - 1).array() += 1.0 / (last * last);
      }
    }
    if (!add_neg_logdet(G2_, z, 1.0, value, grad, hess)) return inf;
    if (has_upper() && !add_neg_logdet(G1_, z, 1.0, value, grad, hess)) return inf;
    if (!add_neg_logdet(W_, z, t * ell_, value, grad, hess)) return inf;
    return value;
  }

 private:
  Eigen::Index r_, d_, nw_, nvar_;
  Matrix S_;
  std::vector<Matrix> lower_, upper_;
  double ell_;
  std::vector<Matrix> basis_;
  std::vector<double> linear_;
  AffineMatrix W_, G1_, G2_;
};

struct BarrierOutcome {
  Vector z;
  double gap_bound = 0.0;
  double decrement = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Newton direction with a Jacobi-scaled factorization; the scaling leaves the
// direction unchanged but tames the spread between θ and W curvatures.
Vector newton_direction(const Matrix& hess, const Vector& grad) {
  const Eigen::Index nvar = grad.size();
  const Vector dinv = hess.diagonal().cwiseAbs().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  Matrix H = dinv.asDiagonal() * hess * dinv.asDiagonal();
  const Vector g = dinv.asDiagonal() * grad;
  Eigen::LDLT<Matrix> ldlt(H);
  Vector step = ldlt.solve(-g);
  if (ldlt.info() != Eigen::Success || !step.allFinite() || g.dot(step) >= 0.0) {
    H += 1e-12 * Matrix::Identity(nvar, nvar);
    step = H.ldlt().solve(-g);
  }
  return dinv.asDiagonal() * step;
}

BarrierOutcome run_barrier(const BarrierProblem& bp, Vector z, const SolverOptions& opts) {
  constexpr double kCenteringTol = 1e-10;  // on λ²/2
  constexpr int kMaxCenteringSteps = 200;
  const double nu = bp.barrier_parameter();
  const Eigen::Index nvar = bp.num_vars();
  BarrierOutcome out;
  const double f0 = bp.objective(z);
  double t = std::max(1e-3, nu / std::max(1.0, std::abs(f0)));
  Vector grad(nvar);
  Matrix hess(nvar, nvar);

  while (out.iterations < opts.max_newton_iterations) {
    double lambda2 = 0.0;
    for (int inner = 0; inner < kMaxCenteringSteps && out.iterations < opts.max_newton_iterations;
         ++inner) {
      const double value = bp.evaluate(z, t, &grad, &hess);
      ++out.iterations;
      const Vector step = newton_direction(hess, grad);
      lambda2 = -grad.dot(step);
      if (!(lambda2 > 0.0) || lambda2 / 2.0 <= kCenteringTol) break;

      // Inside the quadratic region a full step is taken, backtracking only
      // to stay in the domain; function values there differ by less than
      // their rounding error once t is large.
      const bool quadratic = lambda2 < 0.0625;
      const double slope = grad.dot(step);
      double s = 1.0;
      bool moved = false;
      for (int ls = 0; ls < 80; ++ls) {
        const Vector trial = z + s * step;
        const double tv = bp.evaluate(trial, t, nullptr, nullptr);
        if (std::isfinite(tv) && (quadratic || tv <= value + 0.25 * s * slope)) {
          z = trial;
          moved = true;
          break;
        }
        s *= 0.5;
      }
      if (!moved) break;
    }
    const double f = bp.objective(z);
    out.gap_bound = nu / t;
    out.decrement = lambda2 / t;
    if (out.gap_bound <= opts.gap_tol * std::max(1.0, std::abs(f))) {
      // Inside the quadratic region the suboptimality is at most (ν + O(λ²))/t.
      out.converged = lambda2 < 0.0625;
      break;
    }
    t *= opts.barrier_growth;
  }
  out.z = std::move(z);
  return out;
}

}  // namespace

double crdw_constraint_violation(const CrdwProblem& problem, const Matrix& V, const Theta& theta) {
  if (theta.size() != problem.num_vertices()) {
    throw Error(ErrorCode::kInvalidArgument, "theta length does not match the vertex count");
  }
  const Eigen::Index n = problem.dim();
  const Matrix M = weighted_sum(problem.sigma_bar, theta.weights()) +
                   problem.epsilon * Matrix::Identity(n, n);
  // Congruence by D = diag(M)^{-1/2} on the lower-bound matrix and D⁻¹ on V
  // makes every block O(1) whatever the covariance scale.
  const Vector d = M.diagonal().cwiseSqrt().cwiseInverse();
  const Vector dinv = d.cwiseInverse();
  double violation = 0.0;
  if (!problem.upper.empty()) {
    const Matrix U = weighted_sum(problem.upper, theta.weights());
    const Matrix G1 = dinv.asDiagonal() * (U - V) * dinv.asDiagonal();
    violation = std::max(violation, -min_eigenvalue(G1));
  }
  Matrix G2(2 * n, 2 * n);
  G2 << dinv.asDiagonal() * V * dinv.asDiagonal(), Matrix::Identity(n, n),
      Matrix::Identity(n, n), d.asDiagonal() * M * d.asDiagonal();
  violation = std::max(violation, -min_eigenvalue(G2));
  return std::max(violation, 0.0);
}

SolverResult solve_crdw(const WindowStat& window, const CrdwProblem& problem,
                        const SolverOptions& options) {
  const Eigen::Index n = problem.dim();
  const Eigen::Index d = problem.num_vertices();
  if (window.dim() != n) throw Error(ErrorCode::kInvalidArgument, "window dimension does not match the problem");
  if (window.ell <= n) {
    throw Error(ErrorCode::kInvalidArgument, "window length must exceed the ψ dimension");
  }
  const auto ell = static_cast<double>(window.ell);
  const double logdet_S = logdet_chol(window.S);

  const std::vector<bool> pinned = pinned_indices(problem);
  std::vector<Eigen::Index> free_idx, pin_idx;
  for (Eigen::Index i = 0; i < n; ++i) (pinned[static_cast<std::size_t>(i)] ? pin_idx : free_idx).push_back(i);
  const auto r = static_cast<Eigen::Index>(free_idx.size());

  SolverResult result;
  Matrix V = Matrix::Zero(n, n);
  if (!pin_idx.empty()) {
    const Matrix block = select(problem.sigma_bar.front(), pin_idx, pin_idx);
    const Matrix inv = spd_inverse(block);
    for (std::size_t i = 0; i < pin_idx.size(); ++i) {
      for (std::size_t j = 0; j < pin_idx.size(); ++j) V(pin_idx[i], pin_idx[j]) = inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }

  Vector theta = Vector::Constant(d, 1.0 / static_cast<double>(d));
  double gap = 0.0;
  if (r > 0) {
    const Vector bary = theta;
    const Matrix eps_eye = problem.epsilon * Matrix::Identity(r, r);
    std::vector<Matrix> lower, upper;
    for (const Matrix& s : problem.sigma_bar) lower.push_back(select(s, free_idx, free_idx) + eps_eye);
    const Vector scale = weighted_sum(lower, bary).diagonal().cwiseSqrt().cwiseInverse();
    for (Matrix& a : lower) a = symmetrize(scale.asDiagonal() * a * scale.asDiagonal());
    for (const Matrix& u : problem.upper) {
      const Vector inv_scale = scale.cwiseInverse();
      upper.push_back(symmetrize(inv_scale.asDiagonal() * select(u, free_idx, free_idx) * inv_scale.asDiagonal()));
    }
    const Matrix S_free = symmetrize(scale.asDiagonal() * select(window.S, free_idx, free_idx) * scale.asDiagonal());

    BarrierProblem bp(S_free, lower, upper, ell);
    const Matrix lower_inv = spd_inverse(bp.lower_sum(bary));
    // In normalized coordinates the bounds are O(1); a gap this thin is
    // rounding noise around an empty interior.
    if (bp.has_upper() && min_eigenvalue(Matrix(bp.upper_sum(bary) - lower_inv)) <= 1e-10) {
      throw Error(ErrorCode::kDegenerateFeasibleSet,
                  "upper and lower bounds touch at the barycenter; the relaxed set has empty interior");
    }
    const Matrix W0 = bp.has_upper() ? Matrix(0.5 * (lower_inv + bp.upper_sum(bary)))
                                     : Matrix(2.0 * lower_inv);
    Vector z0 = Vector::Zero(bp.num_vars());
    {
      Eigen::Index idx = 0;
      for (Eigen::Index j = 0; j < r; ++j) {
        for (Eigen::Index i = j; i < r; ++i) z0(idx++) = W0(i, j);
      }
      for (Eigen::Index k = 0; k + 1 < d; ++k) z0(idx++) = bary(k);
    }
    if (!std::isfinite(bp.evaluate(z0, 1.0, nullptr, nullptr))) {
      throw Error(ErrorCode::kDegenerateFeasibleSet,
                  "no strictly feasible point at the barycenter; the relaxed set has empty interior");
    }
    const BarrierOutcome outcome = run_barrier(bp, z0, options);
    const Matrix W = bp.unpack_W(outcome.z);
    theta = bp.unpack_theta(outcome.z);
    const Matrix V_free = symmetrize(scale.asDiagonal() * W * scale.asDiagonal());
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < r; ++j) V(free_idx[static_cast<std::size_t>(i)], free_idx[static_cast<std::size_t>(j)]) = V_free(i, j);
    }
    const double f = bp.objective(outcome.z);
    gap = (outcome.gap_bound + outcome.decrement) / std::max(1.0, std::abs(f));
    result.iterations = outcome.iterations;
    result.status = outcome.converged ? SolverStatus::kOptimal : SolverStatus::kMaxIter;
  } else {
    result.status = SolverStatus::kOptimal;
  }

  theta = theta.cwiseMax(0.0);
  theta /= theta.sum();
  result.theta_opt = Theta(theta);
  result.V_opt = V;
  result.objective = (static_cast<double>(n) + 1.0 - ell) * logdet_S + (V * window.S).trace() -
                     ell * logdet_chol(V);
  result.kkt_residual = gap;
  result.constraint_violation = crdw_constraint_violation(problem, V, result.theta_opt);
  if (result.status == SolverStatus::kOptimal && (result.kkt_residual > 1e-6 || result.constraint_violation > 1e-8)) {
    result.status = SolverStatus::kMaxIter;
  }
  return result;
}

SolverResult solve_crdw(const WindowStat& window, const NoisePolytope& poly, double epsilon,
                        const SolverOptions& options) {
  return solve_crdw(window, make_crdw_problem(poly, epsilon), options);
}

}  // namespace crdw
