#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "neuromhe/gradkf.hpp"
#include "neuromhe/mhe.hpp"
#include "neuromhe/quadrotor.hpp"
#include "neuromhe/toy_models.hpp"
#include "test_util.hpp"

using namespace neuromhe;
using namespace neuromhe::testing;

namespace {

struct Solved {
  MheCost cost;
  MheSolution sol;
  CoeffMatrices coeffs;
};

Solved solve_random(const Model& model, std::mt19937_64& rng, int n, bool quad_model, bool random_prior_grad = true) {
  const auto& qm = static_cast<const quad::QuadrotorModel&>(model);
  const auto& tm = static_cast<const ToyPendulumModel&>(model);
  Instance inst = quad_model ? quad_instance(qm, rng, n) : toy_instance(tm, rng, n);
  const WeightSpec wts = quad_model ? quad_weights(rng) : random_weights(rng, 4, 3, 2);
  if (random_prior_grad) inst.window.prior_grad = Matrix(random_vector(rng, inst.window.prior_grad.size()).reshaped(
      inst.window.prior_grad.rows(), inst.window.prior_grad.cols()));
  MheCost cost = build_cost(model, inst.window, wts);
  MheSolution sol = solve_mhe(cost);
  CoeffMatrices coeffs = coeff_matrices(cost, sol);
  return {std::move(cost), std::move(sol), std::move(coeffs)};
}

// Stationarity of the Lagrangian in x_k written out directly:
// H^T R_k (H x_k - y_k) + lambda_{k-1} - F_k^T lambda_k (+ P (x_k - prior) at k = 0).
Vector stationarity_x(const Model& m, const HorizonWindow& win, int k, const Vector& x, const Vector& w,
                      const Vector& lam, const Vector& theta, double r_fixed) {
  const int n = win.horizon();
  const WeightSpec wts = WeightSpec::from_theta(theta, {m.state_dim(), m.measurement_dim(), m.noise_dim()}, r_fixed);
  const Matrix& H = m.measurement_matrix();
  Vector g = H.transpose() * wts.R_at(k, n).cwiseProduct(H * x - win.ys[k]);
  if (k == 0) g += wts.P.cwiseProduct(x - win.prior_x);
  if (k < n) g -= m.jacobians(x, win.us[k], w, win.dt).F.transpose() * lam;
  return g;
}

Vector stationarity_w(const Model& m, const HorizonWindow& win, int k, const Vector& x, const Vector& w,
                      const Vector& lam, const Vector& theta, double r_fixed) {
  const int n = win.horizon();
  const WeightSpec wts = WeightSpec::from_theta(theta, {m.state_dim(), m.measurement_dim(), m.noise_dim()}, r_fixed);
  return wts.Q_at(k, n).cwiseProduct(w) - m.jacobians(x, win.us[k], w, win.dt).G.transpose() * lam;
}

template <class Fn>
Matrix central_jacobian(Fn f, const Vector& at, double h) {
  const Vector f0 = f(at);
  Matrix J(f0.size(), at.size());
  for (int i = 0; i < at.size(); ++i) {
    Vector p = at, q = at;
    p[i] += h;
    q[i] -= h;
    J.col(i) = (f(p) - f(q)) / (2 * h);
  }
  return J;
}

}  // namespace

TEST(Coeffs, LinearMeasurementZeroDuals) {
  ToyPendulumModel model;
  std::mt19937_64 rng(31);
  Instance inst = toy_instance(model, rng, 4, 0.0);
  for (auto& w : inst.truth_w) w.setZero();
  for (int k = 0; k < 4; ++k) inst.truth_x[k + 1] = model.step(inst.truth_x[k], inst.window.us[k], inst.truth_w[k], 0.05);
  for (int k = 0; k <= 4; ++k) inst.window.ys[k] = model.measure(inst.truth_x[k]);
  inst.window.prior_x = inst.truth_x[0];
  const WeightSpec wts = random_weights(rng, 4, 3, 2);
  const MheCost cost = build_cost(model, inst.window, wts);
  const MheSolution sol = solve_mhe(cost);
  MheSolution exact = sol;
  exact.xs = inst.truth_x;
  exact.ws = inst.truth_w;
  exact.duals = recover_duals(cost, exact.xs, exact.ws);
  const CoeffMatrices c = coeff_matrices(cost, exact);
  const Matrix& H = model.measurement_matrix();
  for (int k = 0; k <= 4; ++k) EXPECT_EQ(c.stages[k].lxx, Matrix(H.transpose() * wts.R_at(k, 4).asDiagonal() * H));
}

TEST(Coeffs, QuadrotorNoiseBlockIsQ) {
  quad::QuadrotorModel model;
  std::mt19937_64 rng(32);
  const Solved s = solve_random(model, rng, 6, true);
  for (int k = 0; k < 6; ++k) {
    EXPECT_EQ(s.coeffs.stages[k].lww, Matrix(s.cost.weights().Q_at(k, 6).asDiagonal()));
    EXPECT_EQ(s.coeffs.stages[k].lxw.norm(), 0.0);
  }
}

TEST(Coeffs, MatchFiniteDifferencesOfStationarity) {
  ToyPendulumModel toy;
  quad::QuadrotorModel quadm;
  std::mt19937_64 rng(33);
  for (int t = 0; t < 4; ++t) {
    const bool use_quad = t % 2 == 1;
    const Model& m = use_quad ? static_cast<const Model&>(quadm) : static_cast<const Model&>(toy);
    const Solved s = solve_random(m, rng, 4, use_quad);
    const auto& win = s.cost.window();
    const Vector theta = s.cost.weights().theta();
    const double r0 = s.cost.weights().R[0];
    const double h = 1e-6;
    for (int k = 0; k <= 4; ++k) {
      const Vector& x = s.sol.xs[k];
      const Vector w = k < 4 ? s.sol.ws[k] : Vector::Zero(m.noise_dim());
      const Vector& lam = s.sol.duals[k];
      const StageCoeffs& c = s.coeffs.stages[k];
      Matrix lxx = central_jacobian([&](const Vector& v) { return stationarity_x(m, win, k, v, w, lam, theta, r0); }, x, h);
      if (k == 0) lxx.diagonal() -= s.cost.weights().P;
      EXPECT_LT(rel_err(c.lxx, lxx), 1e-5) << "stage " << k;
      const Matrix lxt = central_jacobian([&](const Vector& v) { return stationarity_x(m, win, k, x, w, lam, v, r0); }, theta, h);
      EXPECT_LT(rel_err(c.lxtheta, lxt), 1e-5) << "stage " << k;
      if (k == 4) continue;
      const Matrix lxw = central_jacobian([&](const Vector& v) { return stationarity_x(m, win, k, x, v, lam, theta, r0); }, w, h);
      const Matrix lww = central_jacobian([&](const Vector& v) { return stationarity_w(m, win, k, x, v, lam, theta, r0); }, w, h);
      const Matrix lwt = central_jacobian([&](const Vector& v) { return stationarity_w(m, win, k, x, w, lam, v, r0); }, theta, h);
      EXPECT_LT((c.lxw - lxw).norm(), 1e-5 * (1 + lxw.norm()));
      EXPECT_LT(rel_err(c.lww, lww), 1e-5);
      EXPECT_LT(rel_err(c.lwtheta, lwt), 1e-5);
    }
  }
}

TEST(Coeffs, SingularNoiseBlockRaisesGradientFailure) {
  ToyPendulumModel model;
  std::mt19937_64 rng(34);
  Solved s = solve_random(model, rng, 3, false);
  s.coeffs.stages[1].lww.setZero();
  try {
    kf_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P);
    FAIL() << "expected GradientFailure";
  } catch (const GradientFailure& e) {
    EXPECT_EQ(e.stage(), 1);
  }
}

TEST(KfGradient, SingularGainRaisesGradientFailure) {
  ToyPendulumModel model;
  std::mt19937_64 rng(35);
  Solved s = solve_random(model, rng, 0, false);
  // I - P^{-1} S singular when S = P at the only stage, i.e. L_xx = -P.
  s.coeffs.stages[0].lxx = -Matrix(s.cost.weights().P.asDiagonal());
  EXPECT_THROW(kf_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P), GradientFailure);
}

TEST(KfGradient, MatchesDenseOracle) {
  ToyPendulumModel toy;
  quad::QuadrotorModel quadm;
  std::mt19937_64 rng(36);
  for (int t = 0; t < 40; ++t) {
    const int n = t % 11;
    const bool use_quad = t % 2 == 1;
    const Model& m = use_quad ? static_cast<const Model&>(quadm) : static_cast<const Model&>(toy);
    const Solved s = solve_random(m, rng, n, use_quad);
    const auto& pg = s.cost.window().prior_grad;
    const Vector& P = s.cost.weights().P;
    const GradientTrajectory kf = kf_gradient(s.coeffs, pg, P);
    const GradientTrajectory dense = dense_kkt_gradient(s.coeffs, pg, P);
    EXPECT_LT(trajectory_rel_err(kf, dense), 1e-8) << "instance " << t << " N=" << n;
    EXPECT_EQ(kf.Lambdas.back().norm(), 0.0);
  }
}

TEST(KfGradient, SingleDataPointClosedForm) {
  ToyPendulumModel model;
  std::mt19937_64 rng(37);
  const Solved s = solve_random(model, rng, 0, false);
  const Matrix& pg = s.cost.window().prior_grad;
  const Vector& Pd = s.cost.weights().P;
  const StageCoeffs& c = s.coeffs.stages[0];
  const GradientTrajectory kf = kf_gradient(s.coeffs, pg, Pd);
  const Matrix P0 = Pd.cwiseInverse().asDiagonal();
  const Matrix S = -c.lxx, T = -c.lxtheta;
  const Matrix xbar = P0 * T + pg;
  const Matrix C = (Matrix::Identity(4, 4) - P0 * S).inverse() * P0;
  const Matrix expect = (Matrix::Identity(4, 4) + C * S) * xbar;
  ASSERT_EQ(kf.Xs.size(), 1u);
  EXPECT_LT((kf.Xs[0] - expect).lpNorm<Eigen::Infinity>(), 1e-12 * (1 + expect.lpNorm<Eigen::Infinity>()));
  EXPECT_TRUE(kf.Ws.empty());
}

TEST(KfGradient, TwoPointCorrectionRelation) {
  quad::QuadrotorModel model;
  std::mt19937_64 rng(38);
  const Solved s = solve_random(model, rng, 1, true);
  const Matrix& pg = s.cost.window().prior_grad;
  const Vector& Pd = s.cost.weights().P;
  const StageCoeffs& c0 = s.coeffs.stages[0];
  const Matrix I = Matrix::Identity(24, 24);
  // Pieces built directly from the coefficient blocks.
  const Matrix lww_inv = c0.lww.inverse();
  const Matrix Fbar = c0.F - c0.G * lww_inv * c0.lwx();
  const Matrix S0 = c0.lxw * lww_inv * c0.lwx() - c0.lxx;
  const Matrix T0 = c0.lxw * lww_inv * c0.lwtheta - c0.lxtheta;
  const Matrix P0 = Pd.cwiseInverse().asDiagonal();
  const Matrix C0 = (I - P0 * S0).inverse() * P0;
  const Matrix xkf0 = (I + C0 * S0) * (P0 * T0 + pg);
  const GradientTrajectory dense = dense_kkt_gradient(s.coeffs, pg, Pd);
  const Matrix rhs = xkf0 + C0 * Fbar.transpose() * dense.Lambdas[0];
  EXPECT_LT((dense.Xs[0] - rhs).lpNorm<Eigen::Infinity>(), 1e-10 * (1 + rhs.lpNorm<Eigen::Infinity>()));
  const GradientTrajectory kf = kf_gradient(s.coeffs, pg, Pd);
  EXPECT_LT((kf.Xs[0] - rhs).lpNorm<Eigen::Infinity>(), 1e-10 * (1 + rhs.lpNorm<Eigen::Infinity>()));
}

TEST(KfGradient, BoundaryConditionsAndSymmetry) {
  quad::QuadrotorModel model;
  std::mt19937_64 rng(39);
  const Solved s = solve_random(model, rng, 8, true);
  const KfGradientResult r = kf_gradient_detailed(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P);
  EXPECT_EQ(r.stages.back().S, Matrix(-s.coeffs.stages.back().lxx));
  EXPECT_EQ(r.stages.back().T, Matrix(-s.coeffs.stages.back().lxtheta));
  EXPECT_EQ(r.trajectory.Lambdas.back().norm(), 0.0);
  EXPECT_EQ(r.trajectory.Xs.back(), r.stages.back().X_kf);
  for (const auto& st : r.stages) {
    EXPECT_LE((st.P_cov - st.P_cov.transpose()).cwiseAbs().maxCoeff(), 1e-12 * (1 + st.P_cov.cwiseAbs().maxCoeff()));
  }
}

TEST(KfGradient, ThetaIndependentCostGivesZero) {
  ToyPendulumModel model;
  std::mt19937_64 rng(40);
  Solved s = solve_random(model, rng, 5, false, false);
  for (auto& st : s.coeffs.stages) {
    st.lxtheta.setZero();
    if (st.lwtheta.size()) st.lwtheta.setZero();
  }
  const Vector& P = s.cost.weights().P;
  for (const auto& tr : {kf_gradient(s.coeffs, s.cost.window().prior_grad, P),
                         dense_kkt_gradient(s.coeffs, s.cost.window().prior_grad, P)}) {
    for (const auto& x : tr.Xs) EXPECT_EQ(x.norm(), 0.0);
    for (const auto& w : tr.Ws) EXPECT_EQ(w.norm(), 0.0);
  }
}

TEST(KfGradient, MatchesFiniteDifferencesOfSolver) {
  ToyPendulumModel model;
  std::mt19937_64 rng(41);
  MheOptions tight;
  tight.tol = 1e-12;
  for (int n : {3, 6, 10}) {
    const Instance inst = toy_instance(model, rng, n);
    const WeightSpec wts = random_weights(rng, 4, 3, 2);
    const MheCost cost = build_cost(model, inst.window, wts);
    const MheSolution sol = solve_mhe(cost, tight);
    ASSERT_TRUE(sol.converged);
    const GradientTrajectory kf = kf_gradient(coeff_matrices(cost, sol), inst.window.prior_grad, wts.P);
    const Vector theta = wts.theta();
    const double h = 1e-4;
    for (int j = 0; j < theta.size(); ++j) {
      Vector tp = theta, tm = theta;
      tp[j] += h;
      tm[j] -= h;
      const auto lay = wts.layout();
      const MheSolution sp = solve_mhe(build_cost(model, inst.window, WeightSpec::from_theta(tp, lay, wts.R[0])), tight, MheInitialGuess{sol.xs[0], sol.ws});
      const MheSolution sm = solve_mhe(build_cost(model, inst.window, WeightSpec::from_theta(tm, lay, wts.R[0])), tight, MheInitialGuess{sol.xs[0], sol.ws});
      double diff = 0, ref = 0;
      for (int k = 0; k <= n; ++k) {
        const Vector fd = (sp.xs[k] - sm.xs[k]) / (2 * h);
        diff += (fd - kf.Xs[k].col(j)).squaredNorm();
        ref += kf.Xs[k].col(j).squaredNorm();
      }
      EXPECT_LT(std::sqrt(diff / ref), 1e-4) << "N=" << n << " column " << j;
    }
  }
}

TEST(Auxiliary, KfSolutionIsStationary) {
  ToyPendulumModel toy;
  quad::QuadrotorModel quadm;
  std::mt19937_64 rng(42);
  for (int t = 0; t < 4; ++t) {
    const bool use_quad = t % 2 == 1;
    const Model& m = use_quad ? static_cast<const Model&>(quadm) : static_cast<const Model&>(toy);
    const Solved s = solve_random(m, rng, 5, use_quad);
    const auto& pg = s.cost.window().prior_grad;
    const Vector& P = s.cost.weights().P;
    const GradientTrajectory kf = kf_gradient(s.coeffs, pg, P);
    const GradientTrajectory dense = dense_kkt_gradient(s.coeffs, pg, P);
    const double j_kf = auxiliary_cost_value(kf, s.coeffs, pg, P);
    EXPECT_NEAR(j_kf, auxiliary_cost_value(dense, s.coeffs, pg, P), 1e-10 * (1 + std::abs(j_kf)));
    // Perturb X_0 and every W_k, propagate through the linearized dynamics.
    const int nx = m.state_dim(), nw = m.noise_dim(), nt = static_cast<int>(pg.cols());
    GradientTrajectory dir;
    dir.Xs.push_back(Matrix(random_vector(rng, nx * nt).reshaped(nx, nt)));
    for (int k = 0; k < 5; ++k) {
      dir.Ws.push_back(Matrix(random_vector(rng, nw * nt).reshaped(nw, nt)));
      dir.Xs.push_back(s.coeffs.stages[k].F * dir.Xs[k] + s.coeffs.stages[k].G * dir.Ws[k]);
    }
    auto shifted = [&](double eps) {
      GradientTrajectory g = kf;
      for (int k = 0; k <= 5; ++k) g.Xs[k] += eps * dir.Xs[k];
      for (int k = 0; k < 5; ++k) g.Ws[k] += eps * dir.Ws[k];
      return auxiliary_cost_value(g, s.coeffs, pg, P);
    };
    const double eps = 1e-3;
    const double slope = (shifted(eps) - shifted(-eps)) / (2 * eps);
    const double curvature = (shifted(eps) - 2 * j_kf + shifted(-eps)) / (eps * eps);
    EXPECT_LT(std::abs(slope), 1e-8 * (1 + std::abs(curvature)));
    EXPECT_GT(curvature, 0.0);
  }
}

TEST(Auxiliary, ZeroTrajectoryZeroCost) {
  ToyPendulumModel model;
  std::mt19937_64 rng(43);
  Solved s = solve_random(model, rng, 3, false, false);
  for (auto& st : s.coeffs.stages) {
    st.lxtheta.setZero();
    if (st.lwtheta.size()) st.lwtheta.setZero();
  }
  GradientTrajectory zero;
  zero.Xs.assign(4, Matrix::Zero(4, 10));
  zero.Ws.assign(3, Matrix::Zero(2, 10));
  EXPECT_EQ(auxiliary_cost_value(zero, s.coeffs, s.cost.window().prior_grad, s.cost.weights().P), 0.0);
}
