#include "crdw/rng.hpp"

#include <cmath>
#include <numbers>

namespace crdw {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed),
      stream_id_(stream_id),
      engine_(splitmix64(splitmix64(seed) ^ splitmix64(stream_id + 0x632BE59BD9B4E019ull))) {}

double RngStream::uniform() {
  ++position_;
  const std::uint64_t bits = engine_() >> 11;
  // 53 random bits mapped to (0, 1].
  return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
}

double RngStream::standard_normal() {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

Vector RngStream::standard_normal(Eigen::Index n) {
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = standard_normal();
  return out;
}

RngStream RngStream::substream(std::uint64_t id) const {
  return RngStream(seed_, splitmix64(stream_id_ * 0x100000001B3ull + id + 1));
}

Vector sample_gaussian(RngStream& rng, const Matrix& factor_or_cov, bool is_factor) {
  const Matrix factor = is_factor ? factor_or_cov : psd_factor(factor_or_cov);
  return factor * rng.standard_normal(factor.cols());
}

}  // namespace crdw
