#include "crdw/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

namespace crdw {

Theta::Theta(Vector weights) : weights_(std::move(weights)) {
  if (weights_.size() == 0) throw Error(ErrorCode::kInvalidArgument, "theta must be nonempty");
  if ((weights_.array() < 0.0).any()) throw Error(ErrorCode::kInvalidArgument, "theta has a negative entry");
  if (std::abs(weights_.sum() - 1.0) > 1e-12) {
    throw Error(ErrorCode::kInvalidArgument, "theta must sum to one");
  }
}

Theta Theta::barycenter(Eigen::Index d) {
  return Theta(Vector::Constant(d, 1.0 / static_cast<double>(d)));
}

Theta Theta::vertex(Eigen::Index d, Eigen::Index k) {
  Vector w = Vector::Zero(d);
  w(k) = 1.0;
  return Theta(std::move(w));
}

Theta Theta::sample(Eigen::Index d, RngStream& rng) {
  Vector w(d);
  for (Eigen::Index k = 0; k < d; ++k) w(k) = -std::log(rng.uniform());
  w /= w.sum();
  // Absorb the last rounding error into the largest weight.
  Eigen::Index kmax = 0;
  w.maxCoeff(&kmax);
  w(kmax) += 1.0 - w.sum();
  return Theta(std::move(w));
}

Matrix steady_state_sigma_delta(const SystemModel& model, const Matrix& sigma_z) {
  const Matrix& L = model.L();
  return solve_discrete_lyapunov(model.observer_dynamics(),
                                 symmetrize(model.sigma_w() + L * sigma_z * L.transpose()));
}

NoisePolytope::NoisePolytope(std::vector<Matrix> vertices, const SystemModel& model)
    : output_dim_(model.output_dim()),
      input_dim_(model.input_dim()),
      sigma_e_(model.sigma_e()),
      vertices_(std::move(vertices)) {
  const Eigen::Index m = output_dim_;
  const auto d = static_cast<Eigen::Index>(vertices_.size());
  if (d == 0) throw Error(ErrorCode::kInvalidArgument, "polytope needs at least one vertex");
  for (const Matrix& v : vertices_) {
    if (v.rows() != m || v.cols() != m) {
      throw Error(ErrorCode::kInvalidArgument, "vertex dimension does not match the output dimension");
    }
    if (!is_symmetric(v, 1e-12)) throw Error(ErrorCode::kInvalidArgument, "vertex not symmetric");
    if (min_eigenvalue(v) < -1e-12 * std::max(1.0, v.norm())) {
      throw Error(ErrorCode::kNotPsd, "vertex not PSD");
    }
  }

  // Affine independence: the d-1 difference vectors must have full rank.
  if (d > 1) {
    Matrix diffs(m * m, d - 1);
    double scale = 0.0;
    for (Eigen::Index k = 1; k < d; ++k) {
      const Matrix delta = vertices_[k] - vertices_[0];
      diffs.col(k - 1) = Eigen::Map<const Vector>(delta.data(), m * m);
      scale = std::max(scale, vertices_[k].norm());
    }
    scale = std::max(scale, vertices_[0].norm());
    Eigen::ColPivHouseholderQR<Matrix> qr(diffs);
    qr.setThreshold(1e-10);
    if (scale == 0.0 || qr.rank() != d - 1) {
      throw Error(ErrorCode::kAffineDependence, "polytope vertices are affinely dependent");
    }
  }

  for (const Matrix& v : vertices_) {
    Matrix sd = steady_state_sigma_delta(model, v);
    const Matrix& C = model.C();
    sigma_bar_.push_back(blkdiag(symmetrize(C * sd * C.transpose() + v), sigma_e_));
    sigma_delta_bar_.push_back(std::move(sd));
  }
}

void NoisePolytope::check_theta(const Theta& theta) const {
  if (theta.size() != num_vertices()) {
    throw Error(ErrorCode::kInvalidArgument, "theta length does not match the vertex count");
  }
}

Matrix NoisePolytope::sigma_z(const Theta& theta) const {
  check_theta(theta);
  Matrix out = Matrix::Zero(output_dim_, output_dim_);
  for (Eigen::Index k = 0; k < num_vertices(); ++k) out += theta[k] * vertices_[k];
  return out;
}

Matrix NoisePolytope::sigma_bar(const Theta& theta) const {
  check_theta(theta);
  Matrix out = Matrix::Zero(psi_dim(), psi_dim());
  for (Eigen::Index k = 0; k < num_vertices(); ++k) out += theta[k] * sigma_bar_[k];
  return out;
}

NoisePolytope build_polytope(std::vector<Matrix> vertices, const SystemModel& model) {
  return NoisePolytope(std::move(vertices), model);
}

Matrix sigma_delta_of_theta(const NoisePolytope& poly, const Theta& theta) {
  if (theta.size() != poly.num_vertices()) {
    throw Error(ErrorCode::kInvalidArgument, "theta length does not match the vertex count");
  }
  const auto& bars = poly.sigma_delta_bar();
  Matrix out = Matrix::Zero(bars.front().rows(), bars.front().cols());
  for (Eigen::Index k = 0; k < theta.size(); ++k) out += theta[k] * bars[k];
  return out;
}

double epsilon_from_norms(double xi, double c_norm, double l_norm, double f_norm) {
  if (xi < 0.0) throw Error(ErrorCode::kInvalidArgument, "xi must be nonnegative");
  if (f_norm >= 1.0) {
    throw Error(ErrorCode::kNormNotContractive,
                "observer matrix norm " + std::to_string(f_norm) + " is not below one");
  }
  const double f2 = f_norm * f_norm;
  return xi * c_norm * c_norm * l_norm * l_norm * f2 / ((1.0 - f2) * (1.0 - f2));
}

double epsilon_bound(double xi, const SystemModel& model, EpsilonNorm norm) {
  const Matrix F = model.observer_dynamics();
  if (norm == EpsilonNorm::kTwoNorm) {
    return epsilon_from_norms(xi, spectral_norm(model.C()), spectral_norm(model.L()),
                              spectral_norm(F));
  }
  const Eigen::Index p = model.state_dim();
  const Matrix P = solve_discrete_lyapunov(F.transpose().eval(), Matrix::Identity(p, p));
  Eigen::SelfAdjointEigenSolver<Matrix> es(P);
  const Matrix& U = es.eigenvectors();
  const Vector root = es.eigenvalues().cwiseSqrt();
  const Matrix T = U * root.asDiagonal() * U.transpose();
  const Matrix T_inv = U * root.cwiseInverse().asDiagonal() * U.transpose();
  return epsilon_from_norms(xi, spectral_norm(model.C() * T_inv), spectral_norm(T * model.L()),
                            spectral_norm(T * F * T_inv));
}

Vector project_to_simplex(const Vector& v) {
  const Eigen::Index d = v.size();
  Vector sorted = v;
  std::sort(sorted.data(), sorted.data() + d, std::greater<>());
  double cumulative = 0.0;
  double shift = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    cumulative += sorted(k);
    const double candidate = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (sorted(k) - candidate > 0.0) shift = candidate;
  }
  Vector out = (v.array() - shift).cwiseMax(0.0);
  return out / out.sum();
}

MembershipResult polytope_membership(const NoisePolytope& poly, const Matrix& target, double tol) {
  const Eigen::Index d = poly.num_vertices();
  const Eigen::Index m = poly.output_dim();
  if (target.rows() != m || target.cols() != m) {
    throw Error(ErrorCode::kInvalidArgument, "membership target has the wrong dimension");
  }
  if (d > 20) throw Error(ErrorCode::kInvalidArgument, "membership check supports at most 20 vertices");
  const double scale = std::max(target.norm(), std::numeric_limits<double>::min());
  Matrix G(m * m, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    G.col(k) = Eigen::Map<const Vector>(poly.vertices()[k].data(), m * m) / scale;
  }
  const Vector t = Eigen::Map<const Vector>(target.data(), m * m) / scale;

  // The optimum is the equality-constrained least-squares solution on its own
  // support, so enumerating supports finds it exactly for small d.
  Vector best = Vector::Constant(d, 1.0 / static_cast<double>(d));
  double best_res = (G * best - t).norm();
  for (unsigned mask = 1; mask < (1u << d); ++mask) {
    std::vector<Eigen::Index> support;
    for (Eigen::Index k = 0; k < d; ++k) {
      if (mask & (1u << k)) support.push_back(k);
    }
    const auto s = static_cast<Eigen::Index>(support.size());
    Matrix kkt = Matrix::Zero(s + 1, s + 1);
    Vector rhs = Vector::Zero(s + 1);
    for (Eigen::Index i = 0; i < s; ++i) {
      for (Eigen::Index j = 0; j < s; ++j) kkt(i, j) = G.col(support[i]).dot(G.col(support[j]));
      kkt(i, s) = kkt(s, i) = 1.0;
      rhs(i) = G.col(support[i]).dot(t);
    }
    rhs(s) = 1.0;
    const Vector sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    Vector theta = Vector::Zero(d);
    bool feasible = true;
    for (Eigen::Index i = 0; i < s; ++i) {
      if (sol(i) < -1e-14) feasible = false;
      theta(support[i]) = std::max(sol(i), 0.0);
    }
    if (!feasible || theta.sum() <= 0.0) continue;
    theta /= theta.sum();
    const double res = (G * theta - t).norm();
    if (res < best_res) {
      best_res = res;
      best = theta;
    }
  }
  Eigen::Index kmax = 0;
  best.maxCoeff(&kmax);
  best(kmax) += 1.0 - best.sum();
  return MembershipResult{Theta(best), best_res * scale, best_res <= tol};
}

}  // namespace crdw
