#pragma once

#include <span>
#include <vector>

#include "neuromhe/dual.hpp"
#include "neuromhe/types.hpp"

namespace neuromhe {

// Jacobians of the discrete prediction model x+ = f(x, u, w, dt).
struct Jacobians {
  Matrix F;  // df/dx
  Matrix G;  // df/dw
};

// Second derivatives of lambda^T f(x, u, w, dt).
struct HessianBlocks {
  Matrix xx;
  Matrix xw;
  Matrix ww;
};

// Discrete-time system used by the estimator. Measurements are linear, y = H x.
class Model {
 public:
  virtual ~Model() = default;

  virtual int state_dim() const = 0;
  virtual int noise_dim() const = 0;
  virtual int input_dim() const = 0;
  int measurement_dim() const { return static_cast<int>(measurement_matrix().rows()); }

  virtual Vector step(const Vector& x, const Vector& u, const Vector& w, double dt) const = 0;
  virtual const Matrix& measurement_matrix() const = 0;
  Vector measure(const Vector& x) const { return measurement_matrix() * x; }

  virtual Jacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const = 0;
  virtual HessianBlocks hessian_contraction(const Vector& x, const Vector& u, const Vector& w,
                                            const Vector& lambda, double dt) const = 0;
};

// Derives Jacobians and contracted Hessians from a scalar-generic step
// function by (nested) forward-mode differentiation. Derived must provide
//   template <class T> void step_generic(std::span<const T> x, std::span<const double> u,
//                                        std::span<const T> w, double dt, std::span<T> out) const;
template <typename Derived>
class AutoDiffModel : public Model {
 public:
  Vector step(const Vector& x, const Vector& u, const Vector& w, double dt) const override {
    Vector out(state_dim());
    self().template step_generic<double>(std::span<const double>(x.data(), x.size()),
                                         std::span<const double>(u.data(), u.size()),
                                         std::span<const double>(w.data(), w.size()), dt,
                                         std::span<double>(out.data(), out.size()));
    return out;
  }

  Jacobians jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const override {
    return autodiff_jacobians(x, u, w, dt);
  }

  HessianBlocks hessian_contraction(const Vector& x, const Vector& u, const Vector& w,
                                    const Vector& lambda, double dt) const override {
    return autodiff_hessian_contraction(x, u, w, lambda, dt);
  }

  Jacobians autodiff_jacobians(const Vector& x, const Vector& u, const Vector& w, double dt) const {
    using D = Dual<double>;
    const int nx = state_dim();
    const int nw = noise_dim();
    std::vector<D> xs(nx), ws(nw), out(nx);
    Jacobians jac{Matrix(nx, nx), Matrix(nx, nw)};
    for (int dir = 0; dir < nx + nw; ++dir) {
      for (int i = 0; i < nx; ++i) xs[i] = D(x[i], dir == i ? 1.0 : 0.0);
      for (int i = 0; i < nw; ++i) ws[i] = D(w[i], dir == nx + i ? 1.0 : 0.0);
      eval(xs, u, ws, dt, out);
      for (int r = 0; r < nx; ++r) {
        if (dir < nx) {
          jac.F(r, dir) = out[r].d;
        } else {
          jac.G(r, dir - nx) = out[r].d;
        }
      }
    }
    return jac;
  }

  HessianBlocks autodiff_hessian_contraction(const Vector& x, const Vector& u, const Vector& w,
                                             const Vector& lambda, double dt) const {
    using D = Dual<double>;
    using DD = Dual<D>;
    const int nx = state_dim();
    const int nw = noise_dim();
    const int nz = nx + nw;
    std::vector<DD> xs(nx), ws(nw), out(nx);
    Matrix hess(nz, nz);
    auto seed = [&](int i, int a, int b) {
      const double base = i < nx ? x[i] : w[i - nx];
      return DD(D(base, i == a ? 1.0 : 0.0), D(i == b ? 1.0 : 0.0, 0.0));
    };
    for (int a = 0; a < nz; ++a) {
      for (int b = a; b < nz; ++b) {
        for (int i = 0; i < nx; ++i) xs[i] = seed(i, a, b);
        for (int i = 0; i < nw; ++i) ws[i] = seed(nx + i, a, b);
        eval(xs, u, ws, dt, out);
        double acc = 0.0;
        for (int r = 0; r < nx; ++r) acc += lambda[r] * out[r].d.d;
        hess(a, b) = acc;
        hess(b, a) = acc;
      }
    }
    return {hess.topLeftCorner(nx, nx), hess.topRightCorner(nx, nw), hess.bottomRightCorner(nw, nw)};
  }

 private:
  const Derived& self() const { return static_cast<const Derived&>(*this); }

  template <typename T>
  void eval(const std::vector<T>& x, const Vector& u, const std::vector<T>& w, double dt,
            std::vector<T>& out) const {
    self().template step_generic<T>(std::span<const T>(x), std::span<const double>(u.data(), u.size()),
                                    std::span<const T>(w), dt, std::span<T>(out));
  }
};

}  // namespace neuromhe
