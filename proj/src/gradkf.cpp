#include "neuromhe/gradkf.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/LU>
#include <Eigen/SVD>

namespace neuromhe {

namespace {

constexpr double kSingularTol = 1e-10;

Eigen::PartialPivLU<Matrix> factor_lww(const Matrix& lww, int k) {
  Eigen::PartialPivLU<Matrix> lu(lww);
  const double rc = lu.rcond();
  if (!(rc > 1e-14)) throw GradientFailure("singular L_ww at stage " + std::to_string(k), k);
  return lu;
}

void check_dims(const CoeffMatrices& c, const Matrix& prior_grad, const Vector& P_diag) {
  if (c.stages.empty()) throw ConfigError("coefficient matrices are empty");
  const int nx = c.state_dim();
  if (prior_grad.rows() != nx || prior_grad.cols() != c.theta_dim()) throw ConfigError("prior gradient has wrong shape");
  if (P_diag.size() != nx) throw ConfigError("arrival weight has wrong dimension");
  if ((P_diag.array() <= 0.0).any()) throw ConfigError("arrival weight must be positive");
}

}  // namespace

CoeffMatrices coeff_matrices(const MheCost& cost, const MheSolution& sol) {
  const Model& model = cost.model();
  const auto& win = cost.window();
  const auto& wts = cost.weights();
  const WeightLayout lay = wts.layout();
  const int n = cost.horizon();
  const int nx = lay.nx, ny = lay.ny, nw = lay.nw, nt = lay.size();
  if (static_cast<int>(sol.xs.size()) != n + 1 || static_cast<int>(sol.ws.size()) != n ||
      static_cast<int>(sol.duals.size()) != n + 1) {
    throw ConfigError("solution does not match the window horizon");
  }
  const Matrix& H = model.measurement_matrix();

  CoeffMatrices out;
  out.H = H;
  out.stages.resize(n + 1);
  for (int k = 0; k <= n; ++k) {
    StageCoeffs& s = out.stages[k];
    const Vector& x = sol.xs[k];
    const Vector r = win.ys[k] - H * x;
    const Vector Rk = wts.R_at(k, n);

    s.lxx = H.transpose() * Rk.asDiagonal() * H;
    s.lxtheta = Matrix::Zero(nx, nt);
    if (k == 0) {
      const Vector dx = x - win.prior_x;
      for (int i = 0; i < nx; ++i) s.lxtheta(i, lay.p(i)) = dx[i];
    }
    const double rs = wts.R_scale(k, n);
    for (int j = 1; j < ny; ++j) s.lxtheta.col(lay.r(j)) = -rs * r[j] * H.row(j).transpose();
    s.lxtheta.col(lay.gamma1()) = -H.transpose() * wts.dR_dgamma1(k, n).cwiseProduct(r);

    BarrierStage b;
    if (cost.barrier()) {
      b = cost.barrier_stage(k, x, k < n ? sol.ws[k] : Vector());
      s.lxx += b.hxx;
    }
    if (k == n) break;

    const Vector& w = sol.ws[k];
    const Jacobians jac = model.jacobians(x, win.us[k], w, win.dt);
    const HessianBlocks hb = model.hessian_contraction(x, win.us[k], w, sol.duals[k], win.dt);
    s.F = jac.F;
    s.G = jac.G;
    s.lxx -= hb.xx;
    s.lxw = -hb.xw;
    s.lww = -hb.ww;
    s.lww.diagonal() += wts.Q_at(k, n);
    if (cost.barrier()) {
      s.lxw += b.hxw;
      s.lww += b.hww;
    }
    s.lwtheta = Matrix::Zero(nw, nt);
    const double qs = wts.Q_scale(k, n);
    for (int i = 0; i < nw; ++i) s.lwtheta(i, lay.q(i)) = qs * w[i];
    s.lwtheta.col(lay.gamma2()) = wts.dQ_dgamma2(k, n).cwiseProduct(w);
    factor_lww(s.lww, k);
  }
  return out;
}

KfGradientResult kf_gradient_detailed(const CoeffMatrices& c, const Matrix& prior_grad, const Vector& P_diag) {
  check_dims(c, prior_grad, P_diag);
  const int n = c.horizon();
  const int nx = c.state_dim();
  const Matrix I = Matrix::Identity(nx, nx);

  KfGradientResult res;
  auto& st = res.stages;
  st.resize(n + 1);

  std::vector<Eigen::PartialPivLU<Matrix>> lww_lu;
  lww_lu.reserve(n);
  // G L_ww^{-1} L_wtheta and G L_ww^{-1} G^T of the previous stage.
  Matrix gl_inv_wtheta, gl_inv_gt;

  // Forward Kalman filter, reducing each stage by eliminating W_k as it goes.
  for (int k = 0; k <= n; ++k) {
    const StageCoeffs& s = c.stages[k];
    KfRecursionState& r = st[k];
    if (k == n) {
      r.S = -s.lxx;
      r.T = -s.lxtheta;
    } else {
      lww_lu.push_back(factor_lww(s.lww, k));
      const auto& lu = lww_lu.back();
      const Matrix inv_wx = lu.solve(s.lwx());
      const Matrix inv_wtheta = lu.solve(s.lwtheta);
      r.Fbar = s.F - s.G * inv_wx;
      r.S = s.lxw * inv_wx - s.lxx;
      r.S = 0.5 * (r.S + r.S.transpose());
      r.T = s.lxw * inv_wtheta - s.lxtheta;
    }

    Matrix pred;
    if (k == 0) {
      r.P_cov = P_diag.cwiseInverse().asDiagonal();
    } else {
      const KfRecursionState& p = st[k - 1];
      pred = p.Fbar * p.X_kf - gl_inv_wtheta;
      r.P_cov = p.Fbar * p.C * p.Fbar.transpose() + gl_inv_gt;
      r.P_cov = 0.5 * (r.P_cov + r.P_cov.transpose());
    }
    const Matrix m = I - r.P_cov * r.S;
    Eigen::BDCSVD<Matrix> svd(m);
    const double smin = svd.singularValues().minCoeff();
    if (!(smin >= kSingularTol)) throw GradientFailure("singular I - P S at stage " + std::to_string(k), k);
    r.C = m.partialPivLu().solve(r.P_cov);
    if (k == 0) {
      const Matrix xbar = r.P_cov * r.T + prior_grad;
      r.X_kf = xbar + r.C * (r.S * xbar);
    } else {
      r.X_kf = pred + r.C * (r.S * pred + r.T);
    }

    if (k < n) {
      gl_inv_wtheta = s.G * lww_lu.back().solve(s.lwtheta);
      gl_inv_gt = s.G * lww_lu.back().solve(s.G.transpose());
    }
  }

  // Backward multiplier pass. The smoothed correction of stage k only needs
  // Lambda_k, so it is applied in the same sweep.
  GradientTrajectory& tr = res.trajectory;
  const int nt = c.theta_dim();
  tr.Lambdas.resize(n + 1);
  tr.Lambdas[n] = Matrix::Zero(nx, nt);
  tr.Xs.resize(n + 1);
  tr.Ws.resize(n);
  tr.Xs[n] = st[n].X_kf;
  for (int k = n; k >= 0; --k) {
    const KfRecursionState& r = st[k];
    Matrix ft;
    if (k < n) {
      const StageCoeffs& s = c.stages[k];
      ft = r.Fbar.transpose() * tr.Lambdas[k];
      tr.Xs[k] = r.X_kf + r.C * ft;
      tr.Ws[k] = lww_lu[k].solve(s.G.transpose() * tr.Lambdas[k] - s.lwx() * tr.Xs[k] - s.lwtheta);
    }
    if (k == 0) break;
    Matrix lam = r.S * tr.Xs[k] + r.T;
    if (k < n) lam += ft;
    tr.Lambdas[k - 1] = std::move(lam);
  }
  for (const auto& x : tr.Xs) {
    if (!x.allFinite()) throw NumericalError("non-finite state sensitivity");
  }
  return res;
}

GradientTrajectory kf_gradient(const CoeffMatrices& coeffs, const Matrix& prior_grad, const Vector& P_diag) {
  return kf_gradient_detailed(coeffs, prior_grad, P_diag).trajectory;
}

GradientTrajectory dense_kkt_gradient(const CoeffMatrices& c, const Matrix& prior_grad, const Vector& P_diag) {
  check_dims(c, prior_grad, P_diag);
  const int n = c.horizon();
  const int nx = c.state_dim();
  const int nw = c.noise_dim();
  const int nt = c.theta_dim();
  const int off_w = (n + 1) * nx;
  const int off_l = off_w + n * nw;
  const int dim = off_l + n * nx;
  auto xcol = [&](int k) { return k * nx; };
  auto wcol = [&](int k) { return off_w + k * nw; };
  auto lcol = [&](int k) { return off_l + k * nx; };

  Matrix A = Matrix::Zero(dim, dim);
  Matrix b = Matrix::Zero(dim, nt);
  int row = 0;
  // Stationarity in x_k.
  for (int k = 0; k <= n; ++k, row += nx) {
    const StageCoeffs& s = c.stages[k];
    A.block(row, xcol(k), nx, nx) = s.lxx;
    if (k == 0) {
      A.block(row, xcol(0), nx, nx).diagonal() += P_diag;
      b.middleRows(row, nx) += P_diag.asDiagonal() * prior_grad;
    } else {
      A.block(row, lcol(k - 1), nx, nx) += Matrix::Identity(nx, nx);
    }
    if (k < n) {
      A.block(row, wcol(k), nx, nw) = s.lxw;
      A.block(row, lcol(k), nx, nx) = -s.F.transpose();
    }
    b.middleRows(row, nx) -= s.lxtheta;
  }
  // Stationarity in w_k.
  for (int k = 0; k < n; ++k, row += nw) {
    const StageCoeffs& s = c.stages[k];
    A.block(row, xcol(k), nw, nx) = s.lwx();
    A.block(row, wcol(k), nw, nw) = s.lww;
    A.block(row, lcol(k), nw, nx) = -s.G.transpose();
    b.middleRows(row, nw) = -s.lwtheta;
  }
  // Linearized dynamics.
  for (int k = 0; k < n; ++k, row += nx) {
    const StageCoeffs& s = c.stages[k];
    A.block(row, xcol(k + 1), nx, nx) = Matrix::Identity(nx, nx);
    A.block(row, xcol(k), nx, nx) = -s.F;
    A.block(row, wcol(k), nx, nw) = -s.G;
  }

  Eigen::PartialPivLU<Matrix> lu(A);
  const Matrix z = lu.solve(b);
  if (!z.allFinite()) throw NumericalError("dense differential KKT solve produced non-finite values");
  const double resid = (A * z - b).norm() / std::max(b.norm(), 1e-300);
  if (!(resid < 1e-8)) throw NumericalError("dense differential KKT matrix is singular");

  GradientTrajectory tr;
  for (int k = 0; k <= n; ++k) tr.Xs.push_back(z.middleRows(xcol(k), nx));
  for (int k = 0; k < n; ++k) tr.Ws.push_back(z.middleRows(wcol(k), nw));
  for (int k = 0; k < n; ++k) tr.Lambdas.push_back(z.middleRows(lcol(k), nx));
  tr.Lambdas.push_back(Matrix::Zero(nx, nt));
  return tr;
}

double auxiliary_cost_value(const GradientTrajectory& tr, const CoeffMatrices& c, const Matrix& prior_grad,
                            const Vector& P_diag) {
  check_dims(c, prior_grad, P_diag);
  const int n = c.horizon();
  if (static_cast<int>(tr.Xs.size()) != n + 1 || static_cast<int>(tr.Ws.size()) != n) {
    throw ConfigError("trajectory does not match the coefficient horizon");
  }
  const Matrix d0 = tr.Xs[0] - prior_grad;
  double j = 0.5 * (d0.transpose() * P_diag.asDiagonal() * d0).trace();
  for (int k = 0; k <= n; ++k) {
    const StageCoeffs& s = c.stages[k];
    const Matrix& X = tr.Xs[k];
    j += 0.5 * (X.transpose() * s.lxx * X).trace() + (X.transpose() * s.lxtheta).trace();
    if (k == n) break;
    const Matrix& W = tr.Ws[k];
    j += (X.transpose() * s.lxw * W).trace() + 0.5 * (W.transpose() * s.lww * W).trace() +
         (W.transpose() * s.lwtheta).trace();
  }
  return j;
}

double trajectory_rel_err(const GradientTrajectory& a, const GradientTrajectory& b, double floor) {
  auto seq_err = [floor](const MatrixSeq& x, const MatrixSeq& y) {
    if (x.size() != y.size()) throw ConfigError("trajectories have different lengths");
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].rows() != y[i].rows() || x[i].cols() != y[i].cols()) throw ConfigError("trajectory shapes differ");
      diff += (x[i] - y[i]).squaredNorm();
      ref += y[i].squaredNorm();
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
  };
  return std::max({seq_err(a.Xs, b.Xs), seq_err(a.Ws, b.Ws), seq_err(a.Lambdas, b.Lambdas)});
}

}  // namespace neuromhe
