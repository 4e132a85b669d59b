#include "neuromhe/quadrotor.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <utility>
#include <cmath>

namespace neuromhe::quad {

void VehicleParams::validate() const {
  if (!(mass > 0.0) || !std::isfinite(mass)) throw ConfigError("vehicle mass must be positive");
  if (!inertia.allFinite() || (inertia - inertia.transpose()).norm() > 1e-12 * inertia.norm()) {
    throw ConfigError("inertia must be finite and symmetric");
  }
  Eigen::LLT<Matrix3> llt(inertia);
  if (llt.info() != Eigen::Success) throw ConfigError("inertia must be positive definite");
  if (!std::isfinite(gravity)) throw ConfigError("gravity must be finite");
}

Vector QuadState::stacked() const {
  Vector xq(kMeasDim);
  xq << p, v, Eigen::Map<const Eigen::Matrix<double, 9, 1>>(R.data()), omega;
  return xq;
}

QuadState QuadState::from_stacked(const Vector& xq) {
  if (xq.size() != kMeasDim) throw DomainError("stacked quadrotor state must have 18 entries");
  QuadState s;
  s.p = xq.segment<3>(0);
  s.v = xq.segment<3>(3);
  s.R = Eigen::Map<const Matrix3>(xq.data() + 6);
  s.omega = xq.segment<3>(15);
  return s;
}

QuadState QuadState::from_augmented(const Vector& x) { return from_stacked(measure(x)); }

Vector augment(const QuadState& s, const Vector3& d_force, const Vector3& d_torque) {
  Vector x(kStateDim);
  x.segment<3>(kPos) = s.p;
  x.segment<3>(kVel) = s.v;
  x.segment<3>(kDistForce) = d_force;
  x.segment<9>(kRot) = Eigen::Map<const Eigen::Matrix<double, 9, 1>>(s.R.data());
  x.segment<3>(kOmega) = s.omega;
  x.segment<3>(kDistTorque) = d_torque;
  return x;
}

Vector3 disturbance_force(const Vector& x) { return x.segment<3>(kDistForce); }
Vector3 disturbance_torque(const Vector& x) { return x.segment<3>(kDistTorque); }
Matrix3 rotation(const Vector& x) { return Eigen::Map<const Matrix3>(x.data() + kRot); }

Matrix3 skew(const Vector3& v) {
  Matrix3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Vector3 vee(const Matrix3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

Matrix3 orthonormalize(const Matrix3& r) {
  Eigen::JacobiSVD<Matrix3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3 u = svd.matrixU();
  const Matrix3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

Vector3 euler_zyx(const Matrix3& r) {
  const double pitch = -std::asin(std::clamp(r(2, 0), -1.0, 1.0));
  return {std::atan2(r(2, 1), r(2, 2)), pitch, std::atan2(r(1, 0), r(0, 0))};
}

namespace {

void check_inputs(const Vector& x, const Vector& u, const Vector& w) {
  if (x.size() != kStateDim || u.size() != kInputDim || w.size() != kNoiseDim) {
    throw DomainError("quadrotor dynamics: wrong input dimensions");
  }
  require_finite(x, "state");
  require_finite(u, "control input");
  require_finite(w, "process noise");
}

}  // namespace

Vector continuous_dynamics(const Vector& x, const Vector& u, const Vector& w, const VehicleParams& params) {
  check_inputs(x, u, w);
  Vector out(kStateDim);
  rates_generic<double>(std::span<const double>(x.data(), kStateDim), std::span<const double>(u.data(), kInputDim),
                        std::span<const double>(w.data(), kNoiseDim), params, params.inertia.inverse(),
                        std::span<double>(out.data(), kStateDim));
  return out;
}

Vector discretize_euler(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params) {
  if (dt < 0.0) throw DomainError("negative time step");
  return x + dt * continuous_dynamics(x, u, w, params);
}

Vector integrate_rk4(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params) {
  if (dt < 0.0) throw DomainError("negative time step");
  const Vector k1 = continuous_dynamics(x, u, w, params);
  const Vector k2 = continuous_dynamics(x + 0.5 * dt * k1, u, w, params);
  const Vector k3 = continuous_dynamics(x + 0.5 * dt * k2, u, w, params);
  const Vector k4 = continuous_dynamics(x + dt * k3, u, w, params);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

const Matrix& measurement_matrix() {
  static const Matrix H = [] {
    Matrix h = Matrix::Zero(kMeasDim, kStateDim);
    for (int i = 0; i < kMeasDim; ++i) h(i, kMeasuredIndex[i]) = 1.0;
    return h;
  }();
  return H;
}

Vector measure(const Vector& x) {
  if (x.size() != kStateDim) throw DomainError("measure: state must have 24 entries");
  Vector y(kMeasDim);
  for (int i = 0; i < kMeasDim; ++i) y[i] = x[kMeasuredIndex[i]];
  return y;
}

StepJacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt, const VehicleParams& params) {
  check_inputs(x, u, w);
  const Matrix3 J = params.inertia;
  const Matrix3 Jinv = J.inverse();
  const Vector3 om = x.segment<3>(kOmega);
  const Matrix3 R = rotation(x);

  Matrix A = Matrix::Zero(kStateDim, kStateDim);
  A.block<3, 3>(kPos, kVel).setIdentity();
  A.block<3, 3>(kVel, kDistForce) = Matrix3::Identity() / params.mass;
  for (int i = 0; i < 3; ++i) A(kVel + i, kRot + i + 6) = u[0] / params.mass;

  // Rdot(i,j) = sum_l R(i,l) W(l,j), W = skew(omega)
  const Matrix3 W = skew(om);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const int row = kRot + i + 3 * j;
      for (int l = 0; l < 3; ++l) A(row, kRot + i + 3 * l) = W(l, j);
      for (int c = 0; c < 3; ++c) {
        const Matrix3 E = skew(Vector3::Unit(c));
        double acc = 0.0;
        for (int l = 0; l < 3; ++l) acc += R(i, l) * E(l, j);
        A(row, kOmega + c) = acc;
      }
    }
  }
  A.block<3, 3>(kOmega, kOmega) = Jinv * (skew(J * om) - W * J);
  A.block<3, 3>(kOmega, kDistTorque) = Jinv;

  StepJacobians out;
  out.F = Matrix::Identity(kStateDim, kStateDim) + dt * A;
  out.G = Matrix::Zero(kStateDim, kNoiseDim);
  out.G.block<3, 3>(kDistForce, 0) = dt * Matrix3::Identity();
  out.G.block<3, 3>(kDistTorque, 3) = dt * Matrix3::Identity();
  out.H = measurement_matrix();
  return out;
}

HessianBlocks dynamics_hessian_contraction(const Vector& x, const Vector& u, const Vector& w, const Vector& lambda,
                                           double dt, const VehicleParams& params) {
  check_inputs(x, u, w);
  if (lambda.size() != kStateDim) throw DomainError("lambda must have 24 entries");
  HessianBlocks h{Matrix::Zero(kStateDim, kStateDim), Matrix::Zero(kStateDim, kNoiseDim),
                  Matrix::Zero(kNoiseDim, kNoiseDim)};

  // lambda_R^T vec(R skew(omega)): bilinear in (R, omega).
  const Matrix3 lamR = Eigen::Map<const Matrix3>(lambda.data() + kRot);
  for (int c = 0; c < 3; ++c) {
    const Matrix3 cross = lamR * skew(Vector3::Unit(c)).transpose();
    for (int i = 0; i < 3; ++i) {
      for (int l = 0; l < 3; ++l) {
        const double val = dt * cross(i, l);
        h.xx(kRot + i + 3 * l, kOmega + c) += val;
        h.xx(kOmega + c, kRot + i + 3 * l) += val;
      }
    }
  }

  // -lambda_w^T J^-1 (omega x J omega): quadratic in omega.
  const Matrix3& J = params.inertia;
  const Vector3 mu = J.inverse().transpose() * lambda.segment<3>(kOmega);
  h.xx.block<3, 3>(kOmega, kOmega) += dt * (skew(mu) * J - J * skew(mu));
  return h;
}

QuadrotorModel::QuadrotorModel(VehicleParams params) : params_(std::move(params)) {
  params_.validate();
  inertia_inv_ = params_.inertia.inverse();
}

Jacobians QuadrotorModel::jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const {
  auto j = quad::jacobians(x, u, w, dt, params_);
  return {std::move(j.F), std::move(j.G)};
}

HessianBlocks QuadrotorModel::hessian_contraction(const Vector& x, const Vector& u, const Vector& w,
                                                  const Vector& lambda, double dt) const {
  return dynamics_hessian_contraction(x, u, w, lambda, dt, params_);
}

}  // namespace neuromhe::quad
