#include "crdw/benchmark.hpp"

namespace crdw::vehicle {
namespace {

Matrix diag3(double a, double b, double c) {
  Matrix M = Matrix::Zero(3, 3);
  M.diagonal() << a, b, c;
  return M;
}

}  // namespace

Matrix A() {
  Matrix M(5, 5);
  // clang-format off
  M << 1.0, 0.0, 0.0, 1.0 / 10.0, 0.0,
       0.5, 1.0, 0.0, 1.0 / 40.0, 0.0,
       0.0, 0.0, 1.0, 0.0,        0.5,
       0.0, 0.0, 0.0, 1.0,        0.0,
       0.0, 0.0, 0.0, 0.0,        1.0;
  // clang-format on
  return M;
}

Matrix B() {
  Matrix M(5, 2);
  // clang-format off
  M << 1.0 / 400.0,  0.0,
       1.0 / 2400.0, 0.0,
       0.0,          1.0 / 800.0,
       1.0 / 20.0,   0.0,
       0.0,          1.0 / 20.0;
  // clang-format on
  return M;
}

Matrix C() {
  Matrix M = Matrix::Zero(3, 5);
  M.leftCols(3).setIdentity();
  return M;
}

Matrix sigma_w() { return 1e-8 * Matrix::Identity(5, 5); }
Matrix sigma_e() { return 0.5 * Matrix::Identity(2, 2); }

Matrix lqr_K() { return dlqr_gain(A(), B(), Matrix::Identity(5, 5), Matrix::Identity(2, 2)); }
Matrix lqr_L() { return dlqe_gain(A(), C(), Matrix::Identity(5, 5), Matrix::Identity(3, 3)); }

SystemModel model() { return SystemModel(A(), B(), C(), lqr_K(), lqr_L(), sigma_w(), sigma_e()); }

AttackSpec attack() {
  return AttackSpec{-1.0, 1e-8 * Matrix::Identity(5, 5), 1e-8 * Matrix::Identity(3, 3),
                    Vector::Zero(5)};
}

std::vector<Matrix> polytope_vertices() {
  return {1e-6 * diag3(300, 1.8, 1.8), 1e-6 * diag3(1.8, 300, 1.8), 1e-6 * diag3(9, 9, 12),
          1e-6 * diag3(9, 9, 9)};
}

Matrix true_sigma_z_fixed() { return 1e-5 * diag3(0.18, 30, 0.18); }
Matrix assumed_sigma_z() { return 1e-5 * Matrix::Identity(3, 3); }

std::vector<Keyframe> varying_keyframes() {
  return {
      Keyframe{0, 1e-5 * diag3(0.9, 0.9, 1.2)},
      Keyframe{250, 1e-5 * diag3(15, 15, 0.18)},
      Keyframe{500, 1e-5 * diag3(30, 0.18, 0.18)},
      Keyframe{650, 1e-5 * diag3(30, 0.18, 0.18)},
      Keyframe{850, 1e-5 * diag3(0.18, 30, 0.18)},
  };
}

}  // namespace crdw::vehicle
