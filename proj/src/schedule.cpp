#include "crdw/schedule.hpp"

#include <string>

namespace crdw {

CovarianceSchedule::CovarianceSchedule(std::vector<Keyframe> keyframes, double declared_xi)
    : keyframes_(std::move(keyframes)), declared_xi_(declared_xi) {
  if (keyframes_.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "schedule needs at least one keyframe");
  }
  if (declared_xi_ < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "declared xi must be nonnegative");
  }
  const Eigen::Index m = keyframes_.front().cov.rows();
  for (std::size_t i = 0; i < keyframes_.size(); ++i) {
    const auto& kf = keyframes_[i];
    if (kf.cov.rows() != m || kf.cov.cols() != m) {
      throw Error(ErrorCode::kInvalidArgument, "keyframe covariances must share one square dimension");
    }
    if (!is_symmetric(kf.cov, 1e-12)) {
      throw Error(ErrorCode::kInvalidArgument, "keyframe covariance not symmetric");
    }
    if (i > 0 && kf.step <= keyframes_[i - 1].step) {
      throw Error(ErrorCode::kInvalidArgument, "keyframe steps must be strictly increasing");
    }
  }

  const long first = keyframes_.front().step;
  const long last = keyframes_.back().step;
  Matrix prev = at(first);
  for (long n = first; n <= last; ++n) {
    const Matrix cur = at(n);
    const double lam = min_eigenvalue(cur);
    if (lam < -1e-12 * std::max(1.0, cur.norm())) {
      throw Error(ErrorCode::kNotPsdAtStep, "interpolated covariance not PSD at step " + std::to_string(n));
    }
    if (n > first) realized_xi_ = std::max(realized_xi_, spectral_norm(cur - prev));
    prev = cur;
  }
}

CovarianceSchedule CovarianceSchedule::constant(const Matrix& cov) {
  return CovarianceSchedule({Keyframe{0, cov}});
}

Matrix CovarianceSchedule::at(long step) const {
  if (step <= keyframes_.front().step) return keyframes_.front().cov;
  if (step >= keyframes_.back().step) return keyframes_.back().cov;
  std::size_t hi = 1;
  while (keyframes_[hi].step < step) ++hi;
  const auto& a = keyframes_[hi - 1];
  const auto& b = keyframes_[hi];
  const double t = static_cast<double>(step - a.step) / static_cast<double>(b.step - a.step);
  return symmetrize((1.0 - t) * a.cov + t * b.cov);
}

CovarianceSchedule schedule_from_keyframes(std::vector<Keyframe> keyframes, double declared_xi) {
  return CovarianceSchedule(std::move(keyframes), declared_xi);
}

}  // namespace crdw
