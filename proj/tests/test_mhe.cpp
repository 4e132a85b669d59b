#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "neuromhe/mhe.hpp"
#include "neuromhe/quadrotor.hpp"
#include "neuromhe/toy_models.hpp"
#include "test_util.hpp"

using namespace neuromhe;
using namespace neuromhe::testing;

namespace {

LinearModel random_linear(std::mt19937_64& rng, int nx, int nw, int ny) {
  Matrix A = Matrix::Identity(nx, nx) + 0.2 * Matrix(random_vector(rng, nx * nx).reshaped(nx, nx));
  Matrix B = random_vector(rng, nx).reshaped(nx, 1);
  Matrix G = random_vector(rng, nx * nw).reshaped(nx, nw);
  Matrix C = random_vector(rng, ny * nx).reshaped(ny, nx);
  return LinearModel(A, B, G, C);
}

// Batch weighted least squares over z = [x_0; w_0..w_{N-1}] from explicit state maps.
Vector batch_least_squares(const LinearModel& m, const HorizonWindow& win, const WeightSpec& wts) {
  const int n = win.horizon(), nx = m.state_dim(), nw = m.noise_dim();
  const int nz = nx + n * nw;
  Matrix hess = Matrix::Zero(nz, nz);
  Vector rhs = Vector::Zero(nz);
  hess.topLeftCorner(nx, nx) += Matrix(wts.P.asDiagonal());
  rhs.head(nx) += wts.P.cwiseProduct(win.prior_x);
  Matrix phi = Matrix::Zero(nx, nz);
  phi.leftCols(nx).setIdentity();
  Vector c = Vector::Zero(nx);
  for (int k = 0; k <= n; ++k) {
    const Matrix Rk = (std::pow(wts.gamma1, n - k) * wts.R).asDiagonal();
    const Matrix cp = m.measurement_matrix() * phi;
    hess += cp.transpose() * Rk * cp;
    rhs += cp.transpose() * Rk * (win.ys[k] - m.measurement_matrix() * c);
    if (k == n) break;
    const Matrix Qk = (std::pow(wts.gamma2, n - 1 - k) * wts.Q).asDiagonal();
    hess.block(nx + k * nw, nx + k * nw, nw, nw) += Qk;
    phi = m.A() * phi;
    phi.middleCols(nx + k * nw, nw) += m.G();
    c = m.A() * c + m.B() * win.us[k];
  }
  return hess.ldlt().solve(rhs);
}

double straight_cost(const Model& m, const HorizonWindow& win, const WeightSpec& wts, const VectorSeq& xs,
                     const VectorSeq& ws) {
  const int n = win.horizon();
  double j = 0;
  for (int i = 0; i < m.state_dim(); ++i) j += 0.5 * wts.P[i] * std::pow(xs[0][i] - win.prior_x[i], 2);
  for (int k = 0; k <= n; ++k) {
    const Vector y = m.measure(xs[k]);
    for (int i = 0; i < m.measurement_dim(); ++i)
      j += 0.5 * std::pow(wts.gamma1, n - k) * wts.R[i] * std::pow(win.ys[k][i] - y[i], 2);
  }
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < m.noise_dim(); ++i) j += 0.5 * std::pow(wts.gamma2, n - 1 - k) * wts.Q[i] * ws[k][i] * ws[k][i];
  return j;
}

double theta_norm(const WeightSpec& w) { return w.theta().norm(); }

}  // namespace

TEST(Cost, ZeroResidualsGiveZero) {
  ToyPendulumModel model;
  std::mt19937_64 rng(11);
  Instance inst = toy_instance(model, rng, 5, 0.0);
  inst.window.prior_x = inst.truth_x[0];
  const WeightSpec wts = random_weights(rng, 4, 3, 2);
  const MheCost cost = build_cost(model, inst.window, wts);
  VectorSeq zeros(5, Vector::Zero(2));
  const VectorSeq xs = cost.rollout(inst.truth_x[0], inst.truth_w);
  EXPECT_NEAR(cost.value(xs, inst.truth_w), straight_cost(model, inst.window, wts, xs, inst.truth_w), 1e-12);
  // Measurement residuals vanish along the true trajectory; only the noise term remains.
  double q_only = 0;
  for (int k = 0; k < 5; ++k) q_only += 0.5 * std::pow(wts.gamma2, 4 - k) * inst.truth_w[k].dot(wts.Q.cwiseProduct(inst.truth_w[k]));
  EXPECT_NEAR(cost.value(xs, inst.truth_w), q_only, 1e-12);
}

TEST(Cost, MatchesStraightTranscription) {
  ToyPendulumModel model;
  std::mt19937_64 rng(12);
  for (int t = 0; t < 10; ++t) {
    Instance inst = toy_instance(model, rng, 1 + t % 6);
    const WeightSpec wts = random_weights(rng, 4, 3, 2);
    const MheCost cost = build_cost(model, inst.window, wts);
    VectorSeq ws;
    for (int k = 0; k < inst.window.horizon(); ++k) ws.push_back(random_vector(rng, 2));
    const Vector x0 = random_vector(rng, 4);
    const VectorSeq xs = cost.rollout(x0, ws);
    EXPECT_NEAR(cost.value(xs, ws), straight_cost(model, inst.window, wts, xs, ws),
                1e-12 * (1 + cost.value(xs, ws)));
  }
}

TEST(Cost, RejectsInvalidWeights) {
  ToyPendulumModel model;
  std::mt19937_64 rng(13);
  Instance inst = toy_instance(model, rng, 3);
  WeightSpec wts = random_weights(rng, 4, 3, 2);
  wts.gamma1 = 1.0;
  EXPECT_THROW(build_cost(model, inst.window, wts), ConfigError);
  wts = random_weights(rng, 4, 3, 2);
  wts.Q[1] = 1e-6;
  EXPECT_THROW(build_cost(model, inst.window, wts), ConfigError);
  wts = random_weights(rng, 4, 3, 2);
  inst.window.ys.pop_back();
  EXPECT_THROW(build_cost(model, inst.window, wts), ConfigError);
}

TEST(Weights, ForgettingExpansion) {
  std::mt19937_64 rng(14);
  WeightSpec w = random_weights(rng, 4, 3, 2);
  w.gamma1 = 0.5;
  EXPECT_EQ(w.R_at(0, 1), 0.5 * w.R_at(1, 1));
  for (int n = 1; n <= 10; ++n)
    for (int k = 0; k <= n; ++k)
      for (int kp = 0; kp < k; ++kp) {
        const Vector expect = std::pow(w.gamma1, k - kp) * w.R_at(k, n);
        EXPECT_LT((w.R_at(kp, n) - expect).cwiseQuotient(expect).cwiseAbs().maxCoeff(), 1e-14);
      }
  EXPECT_EQ(w.Q_at(4, 5), w.Q);
  EXPECT_EQ(w.R_at(5, 5), w.R);
}

TEST(Weights, ThetaRoundTrip) {
  std::mt19937_64 rng(15);
  WeightSpec w = quad_weights(rng);
  const Vector th = w.theta();
  ASSERT_EQ(th.size(), 49);
  const WeightSpec back = WeightSpec::from_theta(th, w.layout());
  EXPECT_EQ(back.theta(), th);
  EXPECT_EQ(back.R[0], 100.0);
}

TEST(Solve, NoiselessFixedPoint) {
  quad::QuadrotorModel model;
  std::mt19937_64 rng(16);
  for (int n : {1, 5, 10}) {
    Instance inst = quad_instance(model, rng, n, 0.01, 0.0);
    for (auto& w : inst.truth_w) w.setZero();
    // Regenerate a noise-free trajectory and measurements.
    for (int k = 0; k < n; ++k) inst.truth_x[k + 1] = model.step(inst.truth_x[k], inst.window.us[k], inst.truth_w[k], 0.01);
    for (int k = 0; k <= n; ++k) inst.window.ys[k] = model.measure(inst.truth_x[k]);
    inst.window.prior_x = inst.truth_x[0];
    const MheSolution sol = solve_mhe(build_cost(model, inst.window, quad_weights(rng)));
    EXPECT_TRUE(sol.converged);
    EXPECT_LT(sol.cost, 1e-8);
    for (int k = 0; k <= n; ++k) EXPECT_LT((sol.xs[k] - inst.truth_x[k]).norm(), 1e-8);
    for (int k = 0; k < n; ++k) EXPECT_LT(sol.ws[k].norm(), 1e-8);
    for (const auto& l : sol.duals) EXPECT_LT(l.norm(), 1e-6);
  }
}

TEST(Solve, LinearMatchesBatchLeastSquares) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    const int nx = 2 + t % 5, nw = 1 + t % 3, ny = 1 + t % nx, n = 1 + t % 8;
    const LinearModel model = random_linear(rng, nx, nw, ny);
    VectorSeq us;
    for (int k = 0; k < n; ++k) us.push_back(random_vector(rng, 1));
    Instance inst = simulate_instance(model, rng, random_vector(rng, nx), us, 0.1, 0.3, 0.1, nx + ny + nw + 1, 0.2);
    const WeightSpec wts = random_weights(rng, nx, ny, nw);
    const MheSolution sol = solve_mhe(build_cost(model, inst.window, wts));
    const Vector z = batch_least_squares(model, inst.window, wts);
    Vector got(nx + n * nw);
    got.head(nx) = sol.xs[0];
    for (int k = 0; k < n; ++k) got.segment(nx + k * nw, nw) = sol.ws[k];
    EXPECT_LT(rel_err(got, z), 1e-8) << "instance " << t;
  }
}

TEST(Duals, ZeroResidualsGiveZeroDuals) {
  ToyPendulumModel model;
  std::mt19937_64 rng(18);
  Instance inst = toy_instance(model, rng, 4, 0.0);
  const MheCost cost = build_cost(model, inst.window, random_weights(rng, 4, 3, 2));
  const VectorSeq ws(4, Vector::Zero(2));
  Vector x0 = inst.truth_x[0];
  for (auto& w : inst.truth_w) w.setZero();
  // With zero noise the truth trajectory is consistent only if regenerated.
  VectorSeq xs = cost.rollout(x0, ws);
  HorizonWindow win = inst.window;
  for (int k = 0; k <= 4; ++k) win.ys[k] = model.measure(xs[k]);
  const MheCost c2 = build_cost(model, win, random_weights(rng, 4, 3, 2));
  for (const auto& l : recover_duals(c2, xs, ws)) EXPECT_EQ(l.norm(), 0.0);
}

TEST(Duals, SingleStepLinearMatchesDenseKkt) {
  std::mt19937_64 rng(19);
  const int nx = 3, nw = 2, ny = 2;
  const LinearModel m = random_linear(rng, nx, nw, ny);
  Instance inst = simulate_instance(m, rng, random_vector(rng, nx), {random_vector(rng, 1)}, 0.1, 0.3, 0.2, 8, 0.3);
  const WeightSpec wts = random_weights(rng, nx, ny, nw);
  const MheSolution sol = solve_mhe(build_cost(m, inst.window, wts));
  // Unknowns [x0; x1; w0; lambda0].
  const Matrix& C = m.measurement_matrix();
  const Matrix R0 = (wts.gamma1 * wts.R).asDiagonal(), R1 = wts.R.asDiagonal(), Q0 = wts.Q.asDiagonal();
  const int d = 3 * nx + nw;
  Matrix K = Matrix::Zero(d, d);
  Vector b = Vector::Zero(d);
  K.block(0, 0, nx, nx) = Matrix(wts.P.asDiagonal()) + C.transpose() * R0 * C;
  K.block(0, 2 * nx + nw, nx, nx) = -m.A().transpose();
  b.head(nx) = wts.P.cwiseProduct(inst.window.prior_x) + C.transpose() * R0 * inst.window.ys[0];
  K.block(nx, nx, nx, nx) = C.transpose() * R1 * C;
  K.block(nx, 2 * nx + nw, nx, nx) = Matrix::Identity(nx, nx);
  b.segment(nx, nx) = C.transpose() * R1 * inst.window.ys[1];
  K.block(2 * nx, 2 * nx, nw, nw) = Q0;
  K.block(2 * nx, 2 * nx + nw, nw, nx) = -m.G().transpose();
  K.block(2 * nx + nw, nx, nx, nx) = Matrix::Identity(nx, nx);
  K.block(2 * nx + nw, 0, nx, nx) = -m.A();
  K.block(2 * nx + nw, 2 * nx, nx, nw) = -m.G();
  b.tail(nx) = m.B() * inst.window.us[0];
  const Vector z = K.partialPivLu().solve(b);
  EXPECT_LT(rel_err(sol.duals[0], z.tail(nx)), 1e-8);
  EXPECT_EQ(sol.duals[1].norm(), 0.0);
}

TEST(Solve, KktResidualsOnRandomInstances) {
  ToyPendulumModel toy;
  quad::QuadrotorModel quadm;
  std::mt19937_64 rng(20);
  for (int t = 0; t < 50; ++t) {
    const int n = 1 + t % 10;
    const bool use_quad = t % 2 == 1;
    const Model& model = use_quad ? static_cast<const Model&>(quadm) : static_cast<const Model&>(toy);
    const Instance inst = use_quad ? quad_instance(quadm, rng, n) : toy_instance(toy, rng, n);
    const WeightSpec wts = use_quad ? quad_weights(rng) : random_weights(rng, 4, 3, 2);
    const MheCost cost = build_cost(model, inst.window, wts);
    const MheSolution sol = solve_mhe(cost);
    EXPECT_TRUE(sol.converged) << "instance " << t << " kkt " << sol.kkt_residual;
    const KktResiduals r = kkt_residuals(cost, sol.xs, sol.ws, sol.duals);
    EXPECT_LE(r.max(), 1e-6 * (1 + theta_norm(wts))) << "instance " << t;
    EXPECT_LE(r.boundary, 1e-6);
    EXPECT_EQ(r.dynamics, 0.0);
    EXPECT_EQ(sol.duals.back().norm(), 0.0);
  }
}

TEST(Solve, ExactHessianOptionAgrees) {
  ToyPendulumModel model;
  std::mt19937_64 rng(21);
  const Instance inst = toy_instance(model, rng, 6, 0.2);
  const MheCost cost = build_cost(model, inst.window, random_weights(rng, 4, 3, 2));
  MheOptions exact;
  exact.exact_hessian = true;
  const MheSolution a = solve_mhe(cost), b = solve_mhe(cost, exact);
  EXPECT_TRUE(a.converged && b.converged);
  for (int k = 0; k <= 6; ++k) EXPECT_LT((a.xs[k] - b.xs[k]).norm(), 1e-7);
}

TEST(Solve, WarmStartNeverWorseThanColdStart) {
  ToyPendulumModel model;
  std::mt19937_64 rng(22);
  for (int t = 0; t < 20; ++t) {
    const int n = 3 + t % 5;
    Instance inst = toy_instance(model, rng, n + 1);
    const WeightSpec wts = random_weights(rng, 4, 3, 2);
    HorizonWindow first = inst.window;
    first.ys.pop_back();
    first.us.pop_back();
    first.max_horizon = n;
    const MheSolution prev = solve_mhe(build_cost(model, first, wts));
    const HorizonWindow next = advance_window(first, prev, inst.window.ys.back(), inst.window.us.back());
    ASSERT_EQ(next.horizon(), n);
    const MheCost cost = build_cost(model, next, wts);
    const MheSolution cold = solve_mhe(cost);
    const MheSolution warm = solve_mhe(cost, {}, shift_guess(prev, true, 2));
    EXPECT_LE(warm.cost, cold.cost + 1e-10 * (1 + cold.cost)) << "instance " << t;
  }
}

TEST(Window, GrowsThenSlides) {
  ToyPendulumModel model;
  std::mt19937_64 rng(23);
  const WeightSpec wts = random_weights(rng, 4, 3, 2);
  Vector x = random_vector(rng, 4, 0.5);
  HorizonWindow win;
  win.ys = {model.measure(x)};
  win.dt = 0.05;
  win.prior_x = x;
  win.prior_grad = Matrix::Zero(4, 10);
  win.max_horizon = 4;
  std::optional<MheInitialGuess> guess;
  for (int t = 0; t < 30; ++t) {
    EXPECT_EQ(win.horizon(), std::min(t, 4));
    const MheSolution sol = solve_mhe(build_cost(model, win, wts), {}, guess);
    EXPECT_LT((sol.xs.back() - x).norm(), 1e-7);
    const Vector u = random_vector(rng, 1);
    x = model.step(x, u, Vector::Zero(2), win.dt);
    const bool slides = win.horizon() == win.max_horizon;
    const HorizonWindow next = advance_window(win, sol, model.measure(x), u);
    if (slides) {
      EXPECT_EQ(next.prior_x, sol.xs[1]);
    } else {
      EXPECT_EQ(next.prior_x, win.prior_x);
    }
    guess = shift_guess(sol, slides, 2);
    win = next;
  }
}

using validate::BarrierToy;

TEST(Barrier, ConvergesToActiveSetSolution) {
  BarrierToy toy;
  const Vector oracle = toy.active_set_solution();
  ASSERT_NEAR(oracle[1], toy.c, 1e-12) << "the constraint should be active in this instance";
  const MheSolution unc = solve_mhe(build_cost(toy.model, toy.window, toy.weights));
  EXPECT_GT(unc.ws[0][0], toy.c);
  double prev = 1e300;
  for (double delta : {1e-2, 1e-4, 1e-6}) {
    const MheCost cost = barrier_augment(build_cost(toy.model, toy.window, toy.weights), toy.constraints(delta));
    MheOptions opt;
    opt.on_accept = [&](const VectorSeq&, const VectorSeq& ws) {
      for (const auto& w : ws) ASSERT_LT(w[0], toy.c);
    };
    const MheSolution sol = solve_mhe(cost, opt);
    EXPECT_TRUE(sol.converged);
    for (const auto& w : sol.ws) EXPECT_LT(w[0], toy.c);
    Vector z(4);
    z << sol.xs[0][0], sol.ws[0][0], sol.ws[1][0], sol.ws[2][0];
    const double dist = (z - oracle).norm();
    EXPECT_LT(dist, prev);
    prev = dist;
    const KktResiduals r = kkt_residuals(cost, sol.xs, sol.ws, sol.duals);
    EXPECT_LT(r.max(), 1e-6);
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Barrier, InactiveConstraintBarelyMoves) {
  ToyPendulumModel model;
  std::mt19937_64 rng(24);
  const Instance inst = toy_instance(model, rng, 6);
  const WeightSpec wts = random_weights(rng, 4, 3, 2);
  SoftConstraint g;
  g.value = [](const Vector& x, const Vector&) { return x[0] - 50.0; };
  g.gradient = [](const Vector&, const Vector&, Vector& gx, Vector&) { gx[0] = 1.0; };
  const MheSolution a = solve_mhe(build_cost(model, inst.window, wts));
  const MheSolution b = solve_mhe(barrier_augment(build_cost(model, inst.window, wts), {{g}, 1e-6}));
  for (int k = 0; k <= 6; ++k) EXPECT_LT(rel_err(b.xs[k], a.xs[k]), 1e-4);
}

TEST(Barrier, RejectsNonInteriorStart) {
  BarrierToy toy;
  toy.c = -0.1;  // the zero-noise cold start violates w <= c
  const MheCost cost = barrier_augment(build_cost(toy.model, toy.window, toy.weights), toy.constraints(1e-3));
  EXPECT_THROW(solve_mhe(cost), DomainError);
}

TEST(Solve, QuadrotorStepDisturbanceConverges) {
  quad::QuadrotorModel model;
  quad::VehicleParams prm;
  std::mt19937_64 rng(25);
  const double dt = 0.01, step_time = 0.3, step = -2.0;
  WeightSpec wts;
  wts.P = Vector::Constant(24, 1.0);
  wts.R = Vector::Constant(18, 100.0);
  wts.Q = Vector::Constant(6, 1e-3);
  wts.gamma1 = 0.9;
  wts.gamma2 = 0.9;
  Vector truth = quad::augment(quad::QuadState{}, Vector3::Zero(), Vector3::Zero());
  Vector u = Vector::Zero(4);
  u[0] = prm.mass * prm.gravity;
  HorizonWindow win;
  win.ys = {quad::measure(truth)};
  win.dt = dt;
  win.prior_x = truth;
  win.prior_grad = Matrix::Zero(24, 49);
  win.max_horizon = 10;
  std::optional<MheInitialGuess> guess;
  double settled_at = -1;
  for (int t = 0; t < 80; ++t) {
    const MheSolution sol = solve_mhe(build_cost(model, win, wts), {}, guess);
    const double time = t * dt;
    const double err = std::abs(sol.xs.back()[quad::kDistForce + 2] - truth[quad::kDistForce + 2]);
    if (time > step_time && err < 0.1 * std::abs(step)) {
      if (settled_at < 0) settled_at = time;
    } else if (time > step_time) {
      settled_at = -1;
    }
    if (std::abs(time + dt - step_time) < 1e-9) truth[quad::kDistForce + 2] = step;
    truth = quad::integrate_rk4(truth, u, Vector::Zero(6), dt, prm);
    const bool slides = win.horizon() == win.max_horizon;
    win = advance_window(win, sol, quad::measure(truth) + random_vector(rng, 18, 1e-3), u);
    guess = shift_guess(sol, slides, 6);
  }
  ASSERT_GT(settled_at, 0.0);
  EXPECT_LT(settled_at - step_time, 0.1);
}
