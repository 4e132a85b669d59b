#pragma once

#include <array>
#include <span>

#include "neuromhe/model.hpp"
#include "neuromhe/types.hpp"

namespace neuromhe::quad {

// Augmented state layout: [p(3); v(3); d_f(3); vec(R)(9, column-major); omega(3); d_tau(3)].
inline constexpr int kStateDim = 24;
inline constexpr int kNoiseDim = 6;
inline constexpr int kInputDim = 4;
inline constexpr int kMeasDim = 18;

inline constexpr int kPos = 0;
inline constexpr int kVel = 3;
inline constexpr int kDistForce = 6;
inline constexpr int kRot = 9;
inline constexpr int kOmega = 18;
inline constexpr int kDistTorque = 21;

// Augmented-state index of each measured component, in measurement order.
inline constexpr std::array<int, kMeasDim> kMeasuredIndex = {0,  1,  2,  3,  4,  5,  9,  10, 11,
                                                             12, 13, 14, 15, 16, 17, 18, 19, 20};
inline constexpr std::array<int, 6> kDisturbanceIndex = {6, 7, 8, 21, 22, 23};

struct VehicleParams {
  double mass = 0.752;
  Matrix3 inertia = Eigen::Vector3d(2.52e-3, 2.14e-3, 4.36e-3).asDiagonal();
  double gravity = 9.81;

  void validate() const;
};

struct QuadState {
  Vector3 p = Vector3::Zero();
  Vector3 v = Vector3::Zero();
  Matrix3 R = Matrix3::Identity();
  Vector3 omega = Vector3::Zero();

  // Returns the 18-entry stacked form [p; v; vec(R); omega].
  Vector stacked() const;
  static QuadState from_stacked(const Vector& xq);
  static QuadState from_augmented(const Vector& x);
};

Vector augment(const QuadState& s, const Vector3& d_force, const Vector3& d_torque);
Vector3 disturbance_force(const Vector& x);
Vector3 disturbance_torque(const Vector& x);
Matrix3 rotation(const Vector& x);

Matrix3 skew(const Vector3& v);
Vector3 vee(const Matrix3& m);
// Nearest rotation in Frobenius norm (polar factor).
Matrix3 orthonormalize(const Matrix3& r);
// ZYX Euler angles (roll, pitch, yaw).
Vector3 euler_zyx(const Matrix3& r);

Vector continuous_dynamics(const Vector& x, const Vector& u, const Vector& w, const VehicleParams& params);
Vector discretize_euler(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params);
Vector integrate_rk4(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params);
Vector measure(const Vector& x);
const Matrix& measurement_matrix();

struct StepJacobians {
  Matrix F;
  Matrix G;
  Matrix H;
};
StepJacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params);
HessianBlocks dynamics_hessian_contraction(const Vector& x, const Vector& u, const Vector& w, const Vector& lambda,
                                           double dt, const VehicleParams& params);

template <typename T>
void rates_generic(std::span<const T> x, std::span<const double> u, std::span<const T> w,
                   const VehicleParams& params, const Matrix3& inertia_inv, std::span<T> out) {
  const double m = params.mass;
  const Matrix3& J = params.inertia;
  auto R = [&](int i, int j) -> const T& { return x[kRot + i + 3 * j]; };
  const T* om = &x[kOmega];

  for (int i = 0; i < 3; ++i) {
    out[kPos + i] = x[kVel + i];
    out[kVel + i] = (R(i, 2) * u[0] + x[kDistForce + i]) / m;
    out[kDistForce + i] = w[i];
    out[kDistTorque + i] = w[3 + i];
  }
  out[kVel + 2] = out[kVel + 2] - params.gravity;

  // Rdot = R * skew(omega)
  const T W[3][3] = {{T(0.0), -om[2], om[1]}, {om[2], T(0.0), -om[0]}, {-om[1], om[0], T(0.0)}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      T acc(0.0);
      for (int l = 0; l < 3; ++l) acc = acc + R(i, l) * W[l][j];
      out[kRot + i + 3 * j] = acc;
    }
  }

  T Jw[3];
  for (int i = 0; i < 3; ++i) Jw[i] = J(i, 0) * om[0] + J(i, 1) * om[1] + J(i, 2) * om[2];
  const T cross[3] = {om[1] * Jw[2] - om[2] * Jw[1], om[2] * Jw[0] - om[0] * Jw[2], om[0] * Jw[1] - om[1] * Jw[0]};
  T rhs[3];
  for (int i = 0; i < 3; ++i) rhs[i] = (u[1 + i] + x[kDistTorque + i]) - cross[i];
  for (int i = 0; i < 3; ++i) {
    out[kOmega + i] = inertia_inv(i, 0) * rhs[0] + inertia_inv(i, 1) * rhs[1] + inertia_inv(i, 2) * rhs[2];
  }
}

// Forward-Euler discretized quadrotor + random-walk disturbance model used as
// the estimator's prediction model. Jacobians and contracted Hessians are
// closed form; the autodiff_* members of the base class stay available as a
// cross-check.
class QuadrotorModel : public AutoDiffModel<QuadrotorModel> {
 public:
  explicit QuadrotorModel(VehicleParams params = {});

  int state_dim() const override { return kStateDim; }
  int noise_dim() const override { return kNoiseDim; }
  int input_dim() const override { return kInputDim; }
  const Matrix& measurement_matrix() const override { return quad::measurement_matrix(); }

  Jacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const override;
  HessianBlocks hessian_contraction(const Vector& x, const Vector& u, const Vector& w, const Vector& lambda,
                                    double dt) const override;

  template <typename T>
  void step_generic(std::span<const T> x, std::span<const double> u, std::span<const T> w, double dt,
                    std::span<T> out) const {
    rates_generic<T>(x, u, w, params_, inertia_inv_, out);
    for (int i = 0; i < kStateDim; ++i) out[i] = x[i] + dt * out[i];
  }

  const VehicleParams& params() const { return params_; }

 private:
  VehicleParams params_;
  Matrix3 inertia_inv_;
};

}  // namespace neuromhe::quad
