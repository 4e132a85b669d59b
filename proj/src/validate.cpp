#include "neuromhe/validate.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace neuromhe::validate {

Vector uniform_vector(std::mt19937_64& rng, int n, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

Instance simulate_instance(const Model& model, std::mt19937_64& rng, const Vector& x0, const VectorSeq& us, double dt,
                           double w_scale, double y_noise, int n_theta, double prior_offset) {
  Instance inst;
  const int n = static_cast<int>(us.size());
  inst.truth_x.push_back(x0);
  for (int k = 0; k < n; ++k) {
    inst.truth_w.push_back(uniform_vector(rng, model.noise_dim(), w_scale));
    inst.truth_x.push_back(model.step(inst.truth_x[k], us[k], inst.truth_w[k], dt));
  }
  for (int k = 0; k <= n; ++k) {
    inst.window.ys.push_back(model.measure(inst.truth_x[k]) + uniform_vector(rng, model.measurement_dim(), y_noise));
  }
  inst.window.us = us;
  inst.window.dt = dt;
  inst.window.prior_x = x0 + uniform_vector(rng, model.state_dim(), prior_offset);
  inst.window.prior_grad = Matrix::Zero(model.state_dim(), n_theta);
  inst.window.max_horizon = std::max(n, 1);
  return inst;
}

WeightSpec random_weights(std::mt19937_64& rng, int nx, int ny, int nw, double r_scale, double q_scale,
                          double p_scale) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  WeightSpec w;
  w.P.resize(nx);
  w.R.resize(ny);
  w.Q.resize(nw);
  for (int i = 0; i < nx; ++i) w.P[i] = p_scale * u(rng);
  for (int i = 0; i < ny; ++i) w.R[i] = r_scale * u(rng);
  for (int i = 0; i < nw; ++i) w.Q[i] = q_scale * u(rng);
  std::uniform_real_distribution<double> g(0.6, 0.95);
  w.gamma1 = g(rng);
  w.gamma2 = g(rng);
  return w;
}

Instance toy_instance(const ToyPendulumModel& model, std::mt19937_64& rng, int horizon, double y_noise) {
  VectorSeq us;
  for (int k = 0; k < horizon; ++k) us.push_back(uniform_vector(rng, 1, 1.0));
  return simulate_instance(model, rng, uniform_vector(rng, 4, 0.8), us, 0.05, 0.3, y_noise, 4 + 3 + 2 + 1, 0.05);
}

Instance quad_instance(const quad::QuadrotorModel& model, std::mt19937_64& rng, int horizon, double dt,
                       double y_noise) {
  quad::QuadState s;
  s.p = uniform_vector(rng, 3, 1.0);
  s.v = uniform_vector(rng, 3, 0.5);
  s.R = Eigen::AngleAxisd(0.3, Vector3(uniform_vector(rng, 3)).normalized()).toRotationMatrix();
  s.omega = uniform_vector(rng, 3, 0.3);
  const Vector x0 = quad::augment(s, uniform_vector(rng, 3, 1.0), uniform_vector(rng, 3, 0.01));
  VectorSeq us;
  for (int k = 0; k < horizon; ++k) {
    Vector u = uniform_vector(rng, 4, 0.01);
    u[0] = 7.4 + uniform_vector(rng, 1, 0.5)[0];
    us.push_back(u);
  }
  return simulate_instance(model, rng, x0, us, dt, 0.5, y_noise, 49, 0.01);
}

WeightSpec quad_weights(std::mt19937_64& rng) {
  WeightSpec w = random_weights(rng, 24, 18, 6, 100.0, 0.1, 1.0);
  w.R[0] = 100.0;
  return w;
}

namespace {

const quad::QuadrotorModel& shared_quad() {
  static const quad::QuadrotorModel model;
  return model;
}

const ToyPendulumModel& shared_toy() {
  static const ToyPendulumModel model;
  return model;
}

double max_abs(const Matrix& m) { return m.size() ? m.lpNorm<Eigen::Infinity>() : 0.0; }

}  // namespace

SolvedInstance solve_random_instance(std::mt19937_64& rng, int horizon, bool quadrotor) {
  Instance inst = quadrotor ? quad_instance(shared_quad(), rng, horizon) : toy_instance(shared_toy(), rng, horizon);
  const WeightSpec wts = quadrotor ? quad_weights(rng) : random_weights(rng, 4, 3, 2);
  Matrix& pg = inst.window.prior_grad;
  pg = uniform_vector(rng, static_cast<int>(pg.size())).reshaped(pg.rows(), pg.cols());
  const Model& model = quadrotor ? static_cast<const Model&>(shared_quad()) : static_cast<const Model&>(shared_toy());
  MheCost cost = build_cost(model, inst.window, wts);
  MheSolution sol = solve_mhe(cost);
  CoeffMatrices coeffs = coeff_matrices(cost, sol);
  return {std::move(cost), std::move(sol), std::move(coeffs)};
}

OracleReport kf_vs_dense(int instances, std::uint64_t seed, int max_horizon, int jobs, bool corrupt) {
  if (instances < 1 || max_horizon < 0 || jobs < 1) throw ConfigError("invalid oracle-check settings");
  // Touch the shared models before the parallel region.
  shared_quad();
  shared_toy();
  OracleReport rep;
  rep.instances = instances;
  rep.rel_errs.assign(static_cast<std::size_t>(instances), std::numeric_limits<double>::quiet_NaN());
  std::vector<int> failed(static_cast<std::size_t>(instances), 0);
#pragma omp parallel for schedule(dynamic) num_threads(jobs)
  for (int i = 0; i < instances; ++i) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(i));
    try {
      const SolvedInstance s = solve_random_instance(rng, i % (max_horizon + 1), i % 2 == 1);
      const Matrix& pg = s.cost.window().prior_grad;
      const Vector& P = s.cost.weights().P;
      CoeffMatrices kf_coeffs = s.coeffs;
      if (corrupt) kf_coeffs.stages.back().lxtheta(0, 0) += 1e-3 * (1.0 + std::abs(kf_coeffs.stages.back().lxtheta(0, 0)));
      const GradientTrajectory kf = kf_gradient(kf_coeffs, pg, P);
      const GradientTrajectory dense = dense_kkt_gradient(s.coeffs, pg, P);
      rep.rel_errs[i] = trajectory_rel_err(kf, dense);
    } catch (const GradientFailure&) {
      failed[i] = 1;
    }
  }
  for (int i = 0; i < instances; ++i) {
    rep.gradient_failures += failed[i];
    if (!failed[i]) rep.max_rel_err = std::max(rep.max_rel_err, rep.rel_errs[i]);
  }
  return rep;
}

std::vector<double> finite_difference_columns(int horizon, std::uint64_t seed, double step, int jobs) {
  if (horizon < 0 || !(step > 0.0) || jobs < 1) throw ConfigError("invalid finite-difference settings");
  const ToyPendulumModel& model = shared_toy();
  std::mt19937_64 rng(seed);
  const Instance inst = toy_instance(model, rng, horizon);
  const WeightSpec wts = random_weights(rng, 4, 3, 2);
  MheOptions tight;
  tight.tol = 1e-12;
  const MheCost cost = build_cost(model, inst.window, wts);
  const MheSolution sol = solve_mhe(cost, tight);
  if (!sol.converged) throw NumericalError("finite-difference base solve did not converge");
  const GradientTrajectory kf = kf_gradient(coeff_matrices(cost, sol), inst.window.prior_grad, wts.P);
  const Vector theta = wts.theta();
  const WeightLayout lay = wts.layout();
  std::vector<double> errs(static_cast<std::size_t>(theta.size()));
#pragma omp parallel for schedule(static) num_threads(jobs)
  for (int j = 0; j < static_cast<int>(theta.size()); ++j) {
    Vector tp = theta, tm = theta;
    tp[j] += step;
    tm[j] -= step;
    const MheInitialGuess guess{sol.xs[0], sol.ws};
    const MheSolution sp = solve_mhe(build_cost(model, inst.window, WeightSpec::from_theta(tp, lay, wts.R[0])), tight, guess);
    const MheSolution sm = solve_mhe(build_cost(model, inst.window, WeightSpec::from_theta(tm, lay, wts.R[0])), tight, guess);
    double diff = 0.0, ref = 0.0;
    for (int k = 0; k <= horizon; ++k) {
      const Vector fd = (sp.xs[k] - sm.xs[k]) / (2 * step);
      diff += (fd - kf.Xs[k].col(j)).squaredNorm();
      ref += kf.Xs[k].col(j).squaredNorm();
    }
    errs[j] = std::sqrt(diff / std::max(ref, 1e-300));
  }
  return errs;
}

InductionReport induction_checks(std::uint64_t seed) {
  InductionReport rep;
  {
    std::mt19937_64 rng(seed);
    const SolvedInstance s = solve_random_instance(rng, 0, false);
    const Matrix& pg = s.cost.window().prior_grad;
    const Vector& Pd = s.cost.weights().P;
    const StageCoeffs& c = s.coeffs.stages[0];
    const int n = static_cast<int>(Pd.size());
    const GradientTrajectory kf = kf_gradient(s.coeffs, pg, Pd);
    const Matrix P0 = Pd.cwiseInverse().asDiagonal();
    const Matrix S = -c.lxx, T = -c.lxtheta;
    const Matrix I = Matrix::Identity(n, n);
    const Matrix C = (I - P0 * S).inverse() * P0;
    const Matrix expect = (I + C * S) * (P0 * T + pg);
    rep.single_point_err = max_abs(kf.Xs.at(0) - expect) / (1.0 + max_abs(expect));
  }
  {
    std::mt19937_64 rng(seed + 1);
    const SolvedInstance s = solve_random_instance(rng, 1, true);
    const Matrix& pg = s.cost.window().prior_grad;
    const Vector& Pd = s.cost.weights().P;
    const StageCoeffs& c0 = s.coeffs.stages[0];
    const int n = static_cast<int>(Pd.size());
    const Matrix I = Matrix::Identity(n, n);
    const Matrix lww_inv = c0.lww.inverse();
    const Matrix Fbar = c0.F - c0.G * lww_inv * c0.lwx();
    const Matrix S0 = c0.lxw * lww_inv * c0.lwx() - c0.lxx;
    const Matrix T0 = c0.lxw * lww_inv * c0.lwtheta - c0.lxtheta;
    const Matrix P0 = Pd.cwiseInverse().asDiagonal();
    const Matrix C0 = (I - P0 * S0).inverse() * P0;
    const Matrix xkf0 = (I + C0 * S0) * (P0 * T0 + pg);
    // Lambda_0 from the dense oracle, the filtered pieces from the blocks above.
    const GradientTrajectory dense = dense_kkt_gradient(s.coeffs, pg, Pd);
    const Matrix rhs = xkf0 + C0 * Fbar.transpose() * dense.Lambdas[0];
    const GradientTrajectory kf = kf_gradient(s.coeffs, pg, Pd);
    rep.two_point_err = max_abs(kf.Xs[0] - rhs) / (1.0 + max_abs(rhs));
  }
  return rep;
}

BarrierToy::BarrierToy() {
  window.ys = {Vector::Constant(1, 0.0), Vector::Constant(1, 0.6), Vector::Constant(1, 1.1), Vector::Constant(1, 1.4)};
  window.us = VectorSeq(3, Vector::Zero(1));
  window.dt = 1.0;
  window.prior_x = Vector::Zero(1);
  window.prior_grad = Matrix::Zero(1, 4);
  window.max_horizon = 3;
  weights.P = Vector::Constant(1, 2.0);
  weights.R = Vector::Constant(1, 5.0);
  weights.Q = Vector::Constant(1, 1.0);
  weights.gamma1 = 0.9;
  weights.gamma2 = 0.8;
}

SoftConstraintSet BarrierToy::constraints(double delta) const {
  SoftConstraint g;
  const double bound = c;
  g.value = [bound](const Vector&, const Vector& w) { return w.size() ? w[0] - bound : -1.0; };
  g.gradient = [](const Vector&, const Vector& w, Vector&, Vector& gw) {
    if (w.size()) gw[0] = 1.0;
  };
  return {{g}, delta};
}

Vector BarrierToy::active_set_solution() const {
  const MheCost cost = build_cost(model, window, weights);
  constexpr int nz = 4;
  auto f = [&](const Vector& z) {
    const VectorSeq ws = {z.segment(1, 1), z.segment(2, 1), z.segment(3, 1)};
    return cost.value(cost.rollout(z.head(1), ws), ws);
  };
  // The problem is quadratic, so unit-step central differences are exact.
  Matrix hess(nz, nz);
  Vector grad0(nz);
  const Vector z0 = Vector::Zero(nz);
  for (int i = 0; i < nz; ++i) {
    const Vector ei = Vector::Unit(nz, i);
    grad0[i] = (f(z0 + ei) - f(z0 - ei)) / 2.0;
    for (int j = 0; j < nz; ++j) {
      const Vector ej = Vector::Unit(nz, j);
      hess(i, j) = (f(z0 + ei + ej) - f(z0 + ei - ej) - f(z0 - ei + ej) + f(z0 - ei - ej)) / 4.0;
    }
  }
  for (int mask = 0; mask < 8; ++mask) {
    std::vector<int> free = {0};
    Vector z = Vector::Zero(nz);
    for (int k = 0; k < 3; ++k) {
      if (mask & (1 << k)) z[1 + k] = c;
      else free.push_back(1 + k);
    }
    const int nf = static_cast<int>(free.size());
    Matrix hf(nf, nf);
    Vector rf(nf);
    for (int a = 0; a < nf; ++a) {
      rf[a] = -grad0[free[a]];
      for (int j = 0; j < nz; ++j) {
        if (std::find(free.begin(), free.end(), j) == free.end()) rf[a] -= hess(free[a], j) * z[j];
      }
      for (int b = 0; b < nf; ++b) hf(a, b) = hess(free[a], free[b]);
    }
    const Vector zf = hf.ldlt().solve(rf);
    for (int a = 0; a < nf; ++a) z[free[a]] = zf[a];
    const Vector g = hess * z + grad0;
    bool ok = true;
    for (int k = 0; k < 3; ++k) {
      if (mask & (1 << k)) ok = ok && g[1 + k] <= 1e-12;
      else ok = ok && z[1 + k] <= c;
    }
    if (ok) return z;
  }
  throw NumericalError("no active set satisfies the KKT conditions");
}

Vector BarrierToy::barrier_solution(double delta, MheSolution* solution) const {
  const MheCost cost = barrier_augment(build_cost(model, window, weights), constraints(delta));
  const MheSolution sol = solve_mhe(cost);
  Vector z(4);
  z << sol.xs[0][0], sol.ws[0][0], sol.ws[1][0], sol.ws[2][0];
  if (solution) *solution = sol;
  return z;
}

std::vector<double> barrier_distances(const std::vector<double>& deltas) {
  const BarrierToy toy;
  const Vector oracle = toy.active_set_solution();
  std::vector<double> out;
  for (double d : deltas) out.push_back((toy.barrier_solution(d) - oracle).norm());
  return out;
}

namespace {

template <class Fn>
double elapsed_ms(Fn&& fn) {
  const auto a = std::chrono::steady_clock::now();
  fn();
  const auto b = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(b - a).count();
}

double median_of(std::vector<double> t) {
  std::sort(t.begin(), t.end());
  const std::size_t n = t.size();
  return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

// Times fn(i) for every instance i once per round, optionally after one
// untimed warm-up round, and returns the per-instance median.
template <class Fn>
std::vector<double> interleaved_medians(std::size_t count, int reps, bool warm_up, Fn&& fn) {
  std::vector<std::vector<double>> t(count);
  if (warm_up) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
  }
  for (int r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < count; ++i) t[i].push_back(elapsed_ms([&] { fn(i); }));
  }
  std::vector<double> out;
  for (auto& v : t) out.push_back(median_of(std::move(v)));
  return out;
}

}  // namespace

std::vector<TimingRow> time_gradients(const std::vector<int>& horizons, int kf_reps, int dense_reps,
                                      std::uint64_t seed) {
  if (kf_reps < 1 || dense_reps < 0) throw ConfigError("invalid repetition counts");
  std::vector<SolvedInstance> instances;
  for (int n : horizons) {
    if (n < 1) throw ConfigError("timing horizons must be >= 1");
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(n));
    // Redraw until the instance is regular so the Kalman filter path runs to the end.
    for (int attempt = 0;; ++attempt) {
      SolvedInstance s = solve_random_instance(rng, n, true);
      try {
        kf_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P);
        instances.push_back(std::move(s));
        break;
      } catch (const GradientFailure&) {
        if (attempt >= 20) throw;
      }
    }
  }
  volatile double sink = 0.0;
  const std::vector<double> kf = interleaved_medians(instances.size(), kf_reps, true, [&](std::size_t i) {
    const SolvedInstance& s = instances[i];
    sink = sink + kf_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P).Xs.back()(0, 0);
  });
  std::vector<double> dense(instances.size(), std::numeric_limits<double>::quiet_NaN());
  if (dense_reps > 0) {
    dense = interleaved_medians(instances.size(), dense_reps, false, [&](std::size_t i) {
      const SolvedInstance& s = instances[i];
      sink = sink + dense_kkt_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P).Xs.back()(0, 0);
    });
  }
  std::vector<TimingRow> rows;
  for (std::size_t i = 0; i < instances.size(); ++i) rows.push_back({horizons[i], kf[i], dense[i]});
  return rows;
}

}  // namespace neuromhe::validate
