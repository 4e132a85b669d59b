#include "neuromhe/mhe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace neuromhe {

void HorizonWindow::validate(const Model& model, int n_theta) const {
  const int n = horizon();
  if (static_cast<int>(ys.size()) != n + 1) throw ConfigError("window needs horizon+1 measurements");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("window time step must be positive");
  if (max_horizon < n) throw ConfigError("window horizon exceeds its maximum");
  for (const auto& y : ys) {
    if (y.size() != model.measurement_dim()) throw ConfigError("measurement has wrong dimension");
    require_finite(y, "measurement");
  }
  for (const auto& u : us) {
    if (u.size() != model.input_dim()) throw ConfigError("control input has wrong dimension");
    require_finite(u, "control input");
  }
  if (prior_x.size() != model.state_dim()) throw ConfigError("prior state has wrong dimension");
  require_finite(prior_x, "prior state");
  if (prior_grad.rows() != model.state_dim() || prior_grad.cols() != n_theta) {
    throw ConfigError("prior gradient has wrong shape");
  }
}

MheCost::MheCost(const Model& model, HorizonWindow window, WeightSpec weights, double weight_floor)
    : model_(&model), window_(std::move(window)), weights_(std::move(weights)) {
  weights_.validate(weight_floor);
  const WeightLayout l = weights_.layout();
  if (l.nx != model.state_dim() || l.ny != model.measurement_dim() || l.nw != model.noise_dim()) {
    throw ConfigError("weights do not match model dimensions");
  }
  window_.validate(model, l.size());
}

void MheCost::set_barrier(SoftConstraintSet set) {
  if (!(set.delta > 0.0)) throw ConfigError("barrier parameter must be positive");
  barrier_ = std::move(set);
}

VectorSeq MheCost::rollout(const Vector& x0, const VectorSeq& ws) const {
  const int n = horizon();
  VectorSeq xs(n + 1);
  xs[0] = x0;
  for (int k = 0; k < n; ++k) xs[k + 1] = model_->step(xs[k], window_.us[k], ws[k], window_.dt);
  return xs;
}

namespace {

bool applies(const SoftConstraint& c, int k) { return c.stage < 0 || c.stage == k; }

const Vector& noise_or_empty(const VectorSeq& ws, int k) {
  static const Vector empty;
  return k < static_cast<int>(ws.size()) ? ws[k] : empty;
}

}  // namespace

bool MheCost::interior(const VectorSeq& xs, const VectorSeq& ws) const {
  if (!barrier_) return true;
  for (int k = 0; k <= horizon(); ++k) {
    for (const auto& c : barrier_->constraints) {
      if (!applies(c, k)) continue;
      const double g = c.value(xs[k], noise_or_empty(ws, k));
      if (!(g < 0.0)) return false;
    }
  }
  return true;
}

double MheCost::value(const VectorSeq& xs, const VectorSeq& ws) const {
  const int n = horizon();
  const Matrix& H = model_->measurement_matrix();
  const Vector dx = xs[0] - window_.prior_x;
  double j = 0.5 * dx.dot(weights_.P.cwiseProduct(dx));
  for (int k = 0; k <= n; ++k) {
    const Vector r = window_.ys[k] - H * xs[k];
    j += 0.5 * weights_.R_scale(k, n) * r.dot(weights_.R.cwiseProduct(r));
  }
  for (int k = 0; k < n; ++k) j += 0.5 * weights_.Q_scale(k, n) * ws[k].dot(weights_.Q.cwiseProduct(ws[k]));
  if (barrier_) {
    for (int k = 0; k <= n; ++k) {
      for (const auto& c : barrier_->constraints) {
        if (!applies(c, k)) continue;
        const double g = c.value(xs[k], noise_or_empty(ws, k));
        if (!(g < 0.0)) return std::numeric_limits<double>::infinity();
        j -= barrier_->delta * std::log(-g);
      }
    }
  }
  return j;
}

BarrierStage MheCost::barrier_stage(int k, const Vector& x, const Vector& w) const {
  const auto nx = x.size();
  const auto nw = w.size();
  BarrierStage b{Vector::Zero(nx), Vector::Zero(nw), Matrix::Zero(nx, nx), Matrix::Zero(nx, nw), Matrix::Zero(nw, nw)};
  if (!barrier_) return b;
  const double delta = barrier_->delta;
  for (const auto& c : barrier_->constraints) {
    if (!applies(c, k)) continue;
    const double g = c.value(x, w);
    if (!(g < 0.0)) throw DomainError("barrier evaluated outside the interior at stage " + std::to_string(k));
    Vector gx = Vector::Zero(nx);
    Vector gw = Vector::Zero(nw);
    c.gradient(x, w, gx, gw);
    // B = -delta ln(-g): dB = delta * dg / (-g), d2B = delta dg dg^T / g^2 + delta d2g / (-g)
    const double s = delta / (-g);
    const double s2 = delta / (g * g);
    b.gx += s * gx;
    b.gw += s * gw;
    b.hxx += s2 * gx * gx.transpose();
    b.hxw += s2 * gx * gw.transpose();
    b.hww += s2 * gw * gw.transpose();
    if (c.hessian) {
      Matrix hxx = Matrix::Zero(nx, nx), hxw = Matrix::Zero(nx, nw), hww = Matrix::Zero(nw, nw);
      c.hessian(x, w, hxx, hxw, hww);
      b.hxx += s * hxx;
      b.hxw += s * hxw;
      b.hww += s * hww;
    }
  }
  return b;
}

MheCost build_cost(const Model& model, const HorizonWindow& window, const WeightSpec& weights, double weight_floor) {
  return MheCost(model, window, weights, weight_floor);
}

MheCost barrier_augment(MheCost cost, SoftConstraintSet constraints) {
  cost.set_barrier(std::move(constraints));
  return cost;
}

double KktResiduals::max() const { return std::max({boundary, states, noise, dynamics}); }

namespace {

struct Linearization {
  std::vector<Jacobians> jac;           // k = 0..n-1
  std::vector<BarrierStage> barrier;    // k = 0..n, empty when no barrier
};

Linearization linearize(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws) {
  const int n = cost.horizon();
  const auto& win = cost.window();
  Linearization lin;
  lin.jac.reserve(n);
  for (int k = 0; k < n; ++k) lin.jac.push_back(cost.model().jacobians(xs[k], win.us[k], ws[k], win.dt));
  if (cost.barrier()) {
    lin.barrier.reserve(n + 1);
    for (int k = 0; k <= n; ++k) lin.barrier.push_back(cost.barrier_stage(k, xs[k], noise_or_empty(ws, k)));
  }
  return lin;
}

VectorSeq duals_from(const MheCost& cost, const VectorSeq& xs, const Linearization& lin) {
  const int n = cost.horizon();
  const auto& win = cost.window();
  const auto& wts = cost.weights();
  const Matrix& H = cost.model().measurement_matrix();
  VectorSeq duals(n + 1);
  duals[n] = Vector::Zero(cost.model().state_dim());
  for (int k = n; k >= 1; --k) {
    const Vector r = win.ys[k] - H * xs[k];
    Vector lam = H.transpose() * (wts.R_at(k, n).cwiseProduct(r));
    if (k < n) lam += lin.jac[k].F.transpose() * duals[k];
    if (!lin.barrier.empty()) lam -= lin.barrier[k].gx;
    duals[k - 1] = std::move(lam);
  }
  return duals;
}

// Gradient of the reduced cost over z = [x_{t-N}; w_{t-N}; ...; w_{t-1}], which is
// exactly the stationarity residual in x_{t-N} and each w_k.
Vector reduced_gradient(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws, const Linearization& lin,
                        const VectorSeq& duals) {
  const int n = cost.horizon();
  const int nx = cost.model().state_dim();
  const int nw = cost.model().noise_dim();
  const auto& win = cost.window();
  const auto& wts = cost.weights();
  const Matrix& H = cost.model().measurement_matrix();
  Vector g(nx + n * nw);
  const Vector r0 = win.ys[0] - H * xs[0];
  Vector gx0 = wts.P.cwiseProduct(xs[0] - win.prior_x) - H.transpose() * wts.R_at(0, n).cwiseProduct(r0);
  if (n > 0) gx0 -= lin.jac[0].F.transpose() * duals[0];
  if (!lin.barrier.empty()) gx0 += lin.barrier[0].gx;
  g.head(nx) = gx0;
  for (int k = 0; k < n; ++k) {
    Vector gw = wts.Q_at(k, n).cwiseProduct(ws[k]) - lin.jac[k].G.transpose() * duals[k];
    if (!lin.barrier.empty()) gw += lin.barrier[k].gw;
    g.segment(nx + k * nw, nw) = gw;
  }
  return g;
}

Matrix reduced_hessian(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws, const Linearization& lin,
                       const VectorSeq& duals, bool exact) {
  const int n = cost.horizon();
  const int nx = cost.model().state_dim();
  const int nw = cost.model().noise_dim();
  const int nz = nx + n * nw;
  const auto& win = cost.window();
  const auto& wts = cost.weights();
  const Matrix& H = cost.model().measurement_matrix();

  Matrix hess = Matrix::Zero(nz, nz);
  hess.topLeftCorner(nx, nx).diagonal() += wts.P;
  Matrix phi = Matrix::Zero(nx, nz);
  phi.leftCols(nx).setIdentity();

  auto add_stage_block = [&](const Matrix& hxx, const Matrix& hxw, const Matrix& hww, int k) {
    hess.noalias() += phi.transpose() * hxx * phi;
    if (k < n && nw > 0) {
      const int c = nx + k * nw;
      const Matrix cross = phi.transpose() * hxw;
      hess.middleCols(c, nw) += cross;
      hess.middleRows(c, nw) += cross.transpose();
      hess.block(c, c, nw, nw) += hww;
    }
  };

  for (int k = 0; k <= n; ++k) {
    const Matrix m = H * phi;
    hess.noalias() += m.transpose() * wts.R_at(k, n).asDiagonal() * m;
    if (!lin.barrier.empty()) add_stage_block(lin.barrier[k].hxx, lin.barrier[k].hxw, lin.barrier[k].hww, k);
    if (k == n) break;
    const int c = nx + k * nw;
    hess.block(c, c, nw, nw).diagonal() += wts.Q_at(k, n);
    if (exact) {
      const HessianBlocks hb = cost.model().hessian_contraction(xs[k], win.us[k], ws[k], duals[k], win.dt);
      add_stage_block(-hb.xx, -hb.xw, -hb.ww, k);
    }
    phi = lin.jac[k].F * phi;
    phi.middleCols(c, nw) += lin.jac[k].G;
  }
  return hess;
}

struct Iterate {
  Vector x0;
  VectorSeq ws;
  VectorSeq xs;
  double cost = 0.0;
};

}  // namespace

VectorSeq recover_duals(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws) {
  return duals_from(cost, xs, linearize(cost, xs, ws));
}

KktResiduals kkt_residuals(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws, const VectorSeq& duals) {
  const int n = cost.horizon();
  const auto& win = cost.window();
  const auto& wts = cost.weights();
  const Matrix& H = cost.model().measurement_matrix();
  const Linearization lin = linearize(cost, xs, ws);
  KktResiduals res;
  for (int k = 0; k <= n; ++k) {
    const Vector r = win.ys[k] - H * xs[k];
    Vector gx = -H.transpose() * wts.R_at(k, n).cwiseProduct(r);
    if (k < n) gx -= lin.jac[k].F.transpose() * duals[k];
    if (!lin.barrier.empty()) gx += lin.barrier[k].gx;
    if (k == 0) {
      gx += wts.P.cwiseProduct(xs[0] - win.prior_x);
      res.boundary = gx.lpNorm<Eigen::Infinity>();
    } else {
      gx += duals[k - 1];
      res.states = std::max(res.states, gx.lpNorm<Eigen::Infinity>());
    }
  }
  for (int k = 0; k < n; ++k) {
    Vector gw = wts.Q_at(k, n).cwiseProduct(ws[k]) - lin.jac[k].G.transpose() * duals[k];
    if (!lin.barrier.empty()) gw += lin.barrier[k].gw;
    res.noise = std::max(res.noise, gw.lpNorm<Eigen::Infinity>());
    const Vector defect = xs[k + 1] - cost.model().step(xs[k], win.us[k], ws[k], win.dt);
    res.dynamics = std::max(res.dynamics, defect.lpNorm<Eigen::Infinity>());
  }
  return res;
}

MheSolution solve_mhe(const MheCost& cost, const MheOptions& opt, const std::optional<MheInitialGuess>& guess) {
  const int n = cost.horizon();
  const int nx = cost.model().state_dim();
  const int nw = cost.model().noise_dim();
  auto make_iterate = [&](Vector x0, VectorSeq ws) {
    Iterate it{std::move(x0), std::move(ws), {}, 0.0};
    it.xs = cost.rollout(it.x0, it.ws);
    it.cost = cost.value(it.xs, it.ws);
    return it;
  };

  Iterate cur;
  bool have = false;
  if (guess && guess->x0.size() == nx && static_cast<int>(guess->ws.size()) == n) {
    cur = make_iterate(guess->x0, guess->ws);
    have = std::isfinite(cur.cost);
  }
  if (!have) {
    cur = make_iterate(cost.window().prior_x, VectorSeq(n, Vector::Zero(nw)));
    if (!std::isfinite(cur.cost)) {
      throw DomainError(cost.barrier() ? "initial MHE iterate is not strictly interior" : "initial MHE cost is not finite");
    }
  }

  auto pack_step = [&](const Iterate& it, const Vector& dz, double alpha) {
    Vector x0 = it.x0 + alpha * dz.head(nx);
    VectorSeq ws = it.ws;
    for (int k = 0; k < n; ++k) ws[k] += alpha * dz.segment(nx + k * nw, nw);
    return make_iterate(std::move(x0), std::move(ws));
  };

  if (opt.on_accept) opt.on_accept(cur.xs, cur.ws);
  double mu = opt.lm_initial;
  MheSolution sol;
  Linearization lin = linearize(cost, cur.xs, cur.ws);
  VectorSeq duals = duals_from(cost, cur.xs, lin);
  Vector grad = reduced_gradient(cost, cur.xs, cur.ws, lin, duals);
  double kkt = grad.lpNorm<Eigen::Infinity>();
  int iter = 0;

  for (; iter < opt.max_iterations && kkt > opt.tol; ++iter) {
    const Matrix hess = reduced_hessian(cost, cur.xs, cur.ws, lin, duals, opt.exact_hessian);
    if (!hess.allFinite()) throw NumericalError("non-finite MHE Hessian");
    Vector scale = hess.diagonal().cwiseAbs();
    const double floor = std::max(1e-10 * scale.maxCoeff(), 1e-300);
    scale = scale.cwiseMax(floor);

    bool accepted = false;
    while (!accepted && mu <= opt.lm_max) {
      Matrix damped = hess;
      damped.diagonal() += mu * scale;
      Eigen::LLT<Matrix> llt(damped);
      if (llt.info() != Eigen::Success) {
        mu *= opt.lm_factor;
        continue;
      }
      const Vector dz = -llt.solve(grad);
      if (!dz.allFinite()) throw NumericalError("non-finite MHE step");
      const double slope = grad.dot(dz);
      double alpha = 1.0;
      for (int bt = 0; bt < opt.max_backtracks; ++bt, alpha *= 0.5) {
        Iterate trial = pack_step(cur, dz, alpha);
        if (!std::isfinite(trial.cost)) continue;  // left the barrier interior
        bool ok = trial.cost <= cur.cost + opt.armijo * alpha * slope;
        Linearization tlin;
        VectorSeq tduals;
        Vector tgrad;
        if (!ok && std::abs(trial.cost - cur.cost) <= 1e-13 * (1.0 + std::abs(cur.cost))) {
          // Cost differences are at rounding level: accept on stationarity progress instead.
          tlin = linearize(cost, trial.xs, trial.ws);
          tduals = duals_from(cost, trial.xs, tlin);
          tgrad = reduced_gradient(cost, trial.xs, trial.ws, tlin, tduals);
          ok = tgrad.lpNorm<Eigen::Infinity>() < kkt;
        }
        if (!ok) continue;
        if (tgrad.size() == 0) {
          tlin = linearize(cost, trial.xs, trial.ws);
          tduals = duals_from(cost, trial.xs, tlin);
          tgrad = reduced_gradient(cost, trial.xs, trial.ws, tlin, tduals);
        }
        cur = std::move(trial);
        if (opt.on_accept) opt.on_accept(cur.xs, cur.ws);
        lin = std::move(tlin);
        duals = std::move(tduals);
        grad = std::move(tgrad);
        kkt = grad.lpNorm<Eigen::Infinity>();
        accepted = true;
        break;
      }
      if (accepted) {
        if (alpha == 1.0) mu = std::max(mu / opt.lm_factor, opt.lm_min);
      } else {
        mu *= opt.lm_factor;
      }
    }
    if (!accepted) {
      ++iter;
      break;
    }
  }

  if (!grad.allFinite() || !std::isfinite(cur.cost)) throw NumericalError("non-finite MHE iterate");
  sol.xs = std::move(cur.xs);
  sol.ws = std::move(cur.ws);
  sol.duals = std::move(duals);
  sol.cost = cur.cost;
  sol.kkt_residual = kkt;
  sol.iterations = iter;
  sol.converged = kkt <= opt.tol;
  return sol;
}

MheInitialGuess shift_guess(const MheSolution& previous, bool window_slides, int noise_dim) {
  MheInitialGuess g;
  if (window_slides && previous.xs.size() > 1) {
    g.x0 = previous.xs[1];
    g.ws.assign(previous.ws.begin() + 1, previous.ws.end());
  } else {
    g.x0 = previous.xs.front();
    g.ws = previous.ws;
  }
  g.ws.push_back(Vector::Zero(noise_dim));
  return g;
}

HorizonWindow advance_window(const HorizonWindow& window, const MheSolution& solution, const Vector& y,
                             const Vector& u, const Matrix* next_prior_grad) {
  HorizonWindow next = window;
  next.ys.push_back(y);
  next.us.push_back(u);
  if (window.horizon() < window.max_horizon) return next;
  if (solution.xs.size() < 2) throw ConfigError("cannot slide a window of horizon zero");
  next.ys.erase(next.ys.begin());
  next.us.erase(next.us.begin());
  next.prior_x = solution.xs[1];
  next.prior_grad = next_prior_grad ? *next_prior_grad : Matrix::Zero(window.prior_grad.rows(), window.prior_grad.cols());
  return next;
}

}  // namespace neuromhe
