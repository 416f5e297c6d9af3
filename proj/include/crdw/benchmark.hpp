#pragma once

// Lane-keeping / speed-control vehicle benchmark: error kinematics with state
// (heading error, lateral error, distance, vehicle angle, velocity), inputs
// (steering, acceleration), v0 = 10, exact discretization at ts = 0.05.

#include <vector>

#include "crdw/plant.hpp"
#include "crdw/schedule.hpp"

namespace crdw::vehicle {

Matrix A();
Matrix B();
/// First three states measured.
Matrix C();
Matrix sigma_w();  // 1e-8 I
Matrix sigma_e();  // 0.5 I

/// Gains from discrete LQR (K) and its dual (L) with identity weights.
Matrix lqr_K();
Matrix lqr_L();

SystemModel model();

/// α = -1, η0 = 0, Σ_O = Σ_S = 1e-8 I.
AttackSpec attack();

/// Extreme points of the measurement-noise polytope (1e-6 scale).
std::vector<Matrix> polytope_vertices();
/// True fixed covariance 1e-5 diag(0.18, 30, 0.18).
Matrix true_sigma_z_fixed();
/// Covariance assumed by the nonrobust statistic, 1e-5 I.
Matrix assumed_sigma_z();

/// Keyframes of the drifting covariance: 250 steps to the first shift, 250 to
/// the second, hold 150, 200 to the last value, then hold.
std::vector<Keyframe> varying_keyframes();
constexpr double kDeclaredXi = 2e-5;

}  // namespace crdw::vehicle
