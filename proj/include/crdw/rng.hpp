#pragma once

#include <cstdint>
#include <optional>
#include <random>

#include "crdw/numerics.hpp"

namespace crdw {

/// Seeded source of standard normals.
///
/// Uniforms come from std::mt19937_64, whose output sequence is fixed by the
/// standard, and normals from Box-Muller computed here, so a given seed yields
/// the same values on every conforming platform (up to libm rounding).
/// Single-owner: never share one stream between threads.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  /// Number of 64-bit words consumed so far.
  std::uint64_t position() const noexcept { return position_; }

  /// Uniform on (0, 1].
  double uniform();
  double standard_normal();
  Vector standard_normal(Eigen::Index n);

  /// An independent stream keyed on (seed, id); does not advance this one.
  RngStream substream(std::uint64_t id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// Mean-zero Gaussian with covariance factor R (cov = R Rᵀ).
Vector sample_gaussian(RngStream& rng, const Matrix& factor_or_cov, bool is_factor);

/// Mean-zero Gaussian draw with covariance `cov` (PSD; rank-deficient allowed).
inline Vector sample_gaussian(RngStream& rng, const Matrix& cov) {
  return sample_gaussian(rng, cov, /*is_factor=*/false);
}

}  // namespace crdw
