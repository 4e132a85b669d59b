#include "neuromhe/toy_models.hpp"

#include <utility>

namespace neuromhe {

LinearModel::LinearModel(Matrix A, Matrix B, Matrix G, Matrix C)
    : A_(std::move(A)), B_(std::move(B)), G_(std::move(G)), C_(std::move(C)) {
  if (A_.rows() != A_.cols() || B_.rows() != A_.rows() || G_.rows() != A_.rows() || C_.cols() != A_.rows()) {
    throw ConfigError("linear model: inconsistent dimensions");
  }
}

Vector LinearModel::step(const Vector& x, const Vector& u, const Vector& w, double /*dt*/) const {
  return A_ * x + B_ * u + G_ * w;
}

Jacobians LinearModel::jacobians(const Vector&, const Vector&, const Vector&, double) const { return {A_, G_}; }

HessianBlocks LinearModel::hessian_contraction(const Vector&, const Vector&, const Vector&, const Vector&,
                                               double) const {
  const auto nx = A_.rows();
  const auto nw = G_.cols();
  return {Matrix::Zero(nx, nx), Matrix::Zero(nx, nw), Matrix::Zero(nw, nw)};
}

ToyPendulumModel::ToyPendulumModel() : C_(Matrix::Zero(3, 4)) {
  C_(0, 0) = 1.0;
  C_(1, 1) = 1.0;
  C_(2, 3) = 1.0;
}

}  // namespace neuromhe
