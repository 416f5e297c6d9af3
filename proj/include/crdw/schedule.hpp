#pragma once

#include <vector>

#include "crdw/numerics.hpp"

namespace crdw {

struct Keyframe {
  long step = 0;
  Matrix cov;
};

/// Piecewise-linear measurement-noise covariance over time, constant after the
/// last keyframe (and before the first).
///
/// Construction validates PSD-ness of every interpolant over the keyframe span
/// and records the realized drift bound max_n ‖Σ_n - Σ_{n-1}‖₂.
class CovarianceSchedule {
 public:
  CovarianceSchedule() = default;
  explicit CovarianceSchedule(std::vector<Keyframe> keyframes, double declared_xi = 0.0);

  static CovarianceSchedule constant(const Matrix& cov);

  Matrix at(long step) const;
  Eigen::Index dim() const { return keyframes_.empty() ? 0 : keyframes_.front().cov.rows(); }
  const std::vector<Keyframe>& keyframes() const { return keyframes_; }

  double realized_xi() const { return realized_xi_; }
  double declared_xi() const { return declared_xi_; }
  /// The larger of the declared and realized bounds.
  double xi() const { return std::max(realized_xi_, declared_xi_); }

 private:
  std::vector<Keyframe> keyframes_;
  double realized_xi_ = 0.0;
  double declared_xi_ = 0.0;
};

CovarianceSchedule schedule_from_keyframes(std::vector<Keyframe> keyframes,
                                           double declared_xi = 0.0);

}  // namespace crdw
