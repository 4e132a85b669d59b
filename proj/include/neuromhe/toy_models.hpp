#pragma once

#include <span>

#include "neuromhe/model.hpp"

namespace neuromhe {

// x+ = A x + B u + G w, y = C x. Used for the closed-form smoother oracles.
class LinearModel : public Model {
 public:
  LinearModel(Matrix A, Matrix B, Matrix G, Matrix C);

  int state_dim() const override { return static_cast<int>(A_.rows()); }
  int noise_dim() const override { return static_cast<int>(G_.cols()); }
  int input_dim() const override { return static_cast<int>(B_.cols()); }
  const Matrix& measurement_matrix() const override { return C_; }

  Vector step(const Vector& x, const Vector& u, const Vector& w, double dt) const override;
  Jacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const override;
  HessianBlocks hessian_contraction(const Vector& x, const Vector& u, const Vector& w, const Vector& lambda,
                                    double dt) const override;

  const Matrix& A() const { return A_; }
  const Matrix& B() const { return B_; }
  const Matrix& G() const { return G_; }

 private:
  Matrix A_, B_, G_, C_;
};

// Four-state nonlinear toy system (damped pendulum, random-walk bias and a
// noise channel that enters multiplicatively) with three measured states.
// All Lagrangian blocks, including L_xw, are generically nonzero.
class ToyPendulumModel : public AutoDiffModel<ToyPendulumModel> {
 public:
  ToyPendulumModel();

  int state_dim() const override { return 4; }
  int noise_dim() const override { return 2; }
  int input_dim() const override { return 1; }
  const Matrix& measurement_matrix() const override { return C_; }

  template <typename T>
  void step_generic(std::span<const T> x, std::span<const double> u, std::span<const T> w, double dt,
                    std::span<T> out) const {
    using std::sin;
    const T angle_rate = x[1];
    const T accel = -9.0 * sin(x[0]) - 0.4 * x[1] + x[2] + u[0] + 0.5 * x[1] * w[1];
    out[0] = x[0] + dt * angle_rate;
    out[1] = x[1] + dt * accel;
    out[2] = x[2] + dt * w[0];
    out[3] = x[3] + dt * (-x[3] + 0.3 * x[0] * x[1] + w[1] * (1.0 + 0.2 * x[3]));
  }

 private:
  Matrix C_;
};

}  // namespace neuromhe
