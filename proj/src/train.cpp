#include "neuromhe/train.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace neuromhe::train {

namespace {

constexpr int kTrackDim = 18;

// Augmented index of each component of the stacked [p; v; vec(R); omega].
constexpr std::array<int, kTrackDim> kTrackIndex = {0, 1, 2, 3, 4, 5, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};

void require_finite_vector(const Vector& v, const char* what) {
  if (!v.allFinite()) throw DomainError(std::string("non-finite ") + what);
}

}  // namespace

LossSpec LossSpec::tracking_default() {
  LossSpec s;
  s.kind = Kind::kTracking;
  s.alpha = 1.0;
  s.We = Vector::Constant(kTrackDim, 1e-3);
  s.We.head<3>().setConstant(1.0);
  s.We.segment<3>(3).setConstant(0.1);
  return s;
}

LossSpec LossSpec::estimation_default() {
  LossSpec s;
  s.kind = Kind::kEstimation;
  s.alpha = 1.0;
  s.We = Vector::Ones(6);
  s.We.tail<3>().setConstant(100.0);
  return s;
}

void LossSpec::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("loss alpha must be > 0");
  const long expected = kind == Kind::kTracking ? kTrackDim : 6;
  if (We.size() != expected) throw ConfigError("loss We has " + std::to_string(We.size()) + " entries, expected " + std::to_string(expected));
  if (!We.allFinite() || (We.array() <= 0.0).any()) throw ConfigError("loss We entries must be > 0");
}

LossResult tracking_loss(const MheSolution& solution, const VectorSeq& reference, const LossSpec& spec) {
  spec.validate();
  if (spec.kind != LossSpec::Kind::kTracking) throw ConfigError("tracking_loss needs a tracking LossSpec");
  if (reference.size() != solution.xs.size()) throw DomainError("reference is not aligned with the window");
  LossResult out;
  for (std::size_t k = 0; k < solution.xs.size(); ++k) {
    const Vector& x = solution.xs[k];
    if (x.size() != quad::kStateDim || reference[k].size() != kTrackDim) throw DomainError("tracking loss dimension mismatch");
    Vector g = Vector::Zero(x.size());
    for (int i = 0; i < kTrackDim; ++i) {
      const double e = x[kTrackIndex[i]] - reference[k][i];
      out.value += spec.alpha * spec.We[i] * e * e;
      g[kTrackIndex[i]] = 2.0 * spec.alpha * spec.We[i] * e;
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

LossResult estimation_loss(const MheSolution& solution, const std::vector<Vector6>& truth, const LossSpec& spec) {
  spec.validate();
  if (spec.kind != LossSpec::Kind::kEstimation) throw ConfigError("estimation_loss needs an estimation LossSpec");
  if (truth.size() != solution.xs.size()) throw DomainError("ground truth is not aligned with the window");
  LossResult out;
  for (std::size_t k = 0; k < solution.xs.size(); ++k) {
    const Vector& x = solution.xs[k];
    if (x.size() != quad::kStateDim) throw DomainError("estimation loss dimension mismatch");
    Vector g = Vector::Zero(x.size());
    for (int i = 0; i < 6; ++i) {
      const int idx = quad::kDisturbanceIndex[i];
      const double e = x[idx] - truth[k][i];
      out.value += spec.alpha * spec.We[i] * e * e;
      g[idx] = 2.0 * spec.alpha * spec.We[i] * e;
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

Vector theta_gradient(const VectorSeq& dl_dx, const GradientTrajectory& traj) {
  if (dl_dx.size() != traj.Xs.size() || traj.Xs.empty()) throw DomainError("loss gradient is not aligned with the sensitivities");
  Vector g = Vector::Zero(traj.Xs.front().cols());
  for (std::size_t k = 0; k < dl_dx.size(); ++k) {
    if (dl_dx[k].size() != traj.Xs[k].rows()) throw DomainError("loss gradient dimension mismatch");
    g.noalias() += traj.Xs[k].transpose() * dl_dx[k];
  }
  return g;
}

Vector assemble_gradient(const VectorSeq& dl_dx, const GradientTrajectory& traj, const Vector& weights_jac,
                         const MlpParams& params, const MlpCache& cache) {
  const Vector g = theta_gradient(dl_dx, traj);
  if (weights_jac.size() != g.size() || params.output_dim() != g.size()) throw DomainError("weight map dimension mismatch");
  return mlp_backward(params, cache, g.cwiseProduct(weights_jac)).flatten();
}

void AdamHyper::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("adam lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
}

void adam_update(AdamState& state, Vector& params, const Vector& gradient) {
  if (state.m.size() != params.size() || gradient.size() != params.size()) throw DomainError("adam dimension mismatch");
  const auto& h = state.hyper;
  ++state.step;
  state.m = h.beta1 * state.m + (1.0 - h.beta1) * gradient;
  state.v = h.beta2 * state.v + (1.0 - h.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (int i = 0; i < params.size(); ++i) {
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

WeightPolicy WeightPolicy::neural(MlpParams params, WeightLayout layout, std::optional<Standardizer> standardizer,
                                  double floor, double r_fixed, double r_floor) {
  params.validate();
  if (params.output_dim() != layout.size()) throw ConfigError("network output size does not match the weight layout");
  if (standardizer && (standardizer->mean.size() != params.input_dim() || standardizer->scale.size() != params.input_dim())) {
    throw ConfigError("standardizer size does not match the network input");
  }
  WeightPolicy p;
  p.neural_ = true;
  p.layout_ = layout;
  p.floor_ = floor;
  p.r_fixed_ = r_fixed;
  p.r_floor_ = r_floor;
  p.mlp_ = std::move(params);
  p.standardizer_ = std::move(standardizer);
  return p;
}

WeightPolicy WeightPolicy::fixed(Vector raw, WeightLayout layout, double floor, double r_fixed, double r_floor) {
  if (raw.size() != layout.size()) throw ConfigError("raw weight vector does not match the weight layout");
  require_finite_vector(raw, "raw weights");
  WeightPolicy p;
  p.layout_ = layout;
  p.floor_ = floor;
  p.r_fixed_ = r_fixed;
  p.r_floor_ = r_floor;
  p.raw_ = std::move(raw);
  return p;
}

WeightSpec WeightPolicy::weights(const Vector& y, Evaluation* eval) const {
  Evaluation local;
  Evaluation& e = eval != nullptr ? *eval : local;
  if (neural_) {
    if (y.size() != mlp_.input_dim()) throw DomainError("measurement size does not match the network input");
    e.raw = mlp_forward(mlp_, standardizer_ ? standardizer_->apply(y) : y, &e.cache);
  } else {
    e.raw = raw_;
  }
  return map_to_weights(e.raw, layout_, floor_, r_fixed_, r_floor_);
}

Vector WeightPolicy::parameters() const { return neural_ ? mlp_.flatten() : raw_; }

void WeightPolicy::set_parameters(const Vector& p) {
  require_finite_vector(p, "policy parameters");
  if (neural_) {
    mlp_.unflatten(p);
  } else {
    if (p.size() != raw_.size()) throw DomainError("parameter size mismatch");
    raw_ = p;
  }
}

Vector WeightPolicy::backprop(const Vector& dl_dtheta, const Evaluation& eval) const {
  if (dl_dtheta.size() != layout_.size()) throw DomainError("theta gradient size mismatch");
  const Vector upstream = dl_dtheta.cwiseProduct(weights_jacobian(eval.raw, layout_));
  if (!neural_) return upstream;
  return mlp_backward(mlp_, eval.cache, upstream).flatten();
}

void EstimatorConfig::validate() const {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (!(dt > 0.0)) throw ConfigError("estimator dt must be > 0");
  if (solver.max_iterations < 1 || !(solver.tol > 0.0)) throw ConfigError("invalid solver options");
  if (!initial_disturbance.allFinite()) throw ConfigError("initial disturbance must be finite");
  adam.validate();
}

MheEstimator::MheEstimator(const quad::QuadrotorModel& model, WeightPolicy& policy, EstimatorConfig config,
                           WindowLoss loss, AdamState* adam)
    : model_(&model), policy_(&policy), config_(std::move(config)), loss_(std::move(loss)), adam_(adam) {
  config_.validate();
  if (config_.learn && (!loss_ || adam_ == nullptr)) throw ConfigError("learning needs a loss and an optimizer state");
  if (adam_ != nullptr && adam_->m.size() != policy.parameters().size()) throw ConfigError("optimizer state does not match the policy");
}

sim::EstimatorReport MheEstimator::update(const Vector& y, const Vector& u_prev, int step) {
  const int nx = model_->state_dim();
  const int nw = model_->noise_dim();
  const int n_theta = policy_->layout().size();
  std::optional<MheInitialGuess> guess;
  if (!window_) {
    HorizonWindow w;
    w.ys = {y};
    w.dt = config_.dt;
    w.max_horizon = config_.horizon;
    w.prior_x = model_->measurement_matrix().transpose() * y;
    for (int i = 0; i < 6; ++i) w.prior_x[quad::kDisturbanceIndex[i]] = config_.initial_disturbance[i];
    w.prior_grad = Matrix::Zero(nx, n_theta);
    window_ = std::move(w);
  } else {
    const bool slides = window_->horizon() == window_->max_horizon;
    const Matrix* pg = slides && next_prior_grad_ ? &*next_prior_grad_ : nullptr;
    window_ = advance_window(*window_, *last_, y, u_prev, pg);
    guess = shift_guess(*last_, slides, nw);
  }

  WeightPolicy::Evaluation eval;
  const WeightSpec weights = policy_->weights(y, &eval);
  const MheCost cost = build_cost(*model_, *window_, weights, policy_->floor());
  MheSolution sol = solve_mhe(cost, config_.solver, guess);

  sim::EstimatorReport rep;
  rep.x_hat = sol.xs.back();
  rep.kkt = sol.kkt_residual;
  rep.converged = sol.converged;
  ++stats_.steps;
  stats_.max_kkt = std::max(stats_.max_kkt, sol.kkt_residual);

  std::optional<LossResult> loss;
  if (loss_) {
    loss = loss_(sol, step);
    rep.loss = loss->value;
    stats_.loss_sum += loss->value;
    ++stats_.loss_count;
  }

  if (config_.learn) {
    next_prior_grad_.reset();
    if (!sol.converged) {
      ++stats_.skipped_nonconverged;
      rep.skipped = true;
    } else {
      try {
        const CoeffMatrices coeffs = coeff_matrices(cost, sol);
        const GradientTrajectory traj = kf_gradient(coeffs, window_->prior_grad, weights.P);
        const Vector g = policy_->backprop(theta_gradient(loss->grad, traj), eval);
        if (!g.allFinite()) throw GradientFailure("non-finite parameter gradient", -1);
        if (traj.Xs.size() > 1) next_prior_grad_ = traj.Xs[1];
        if (config_.accumulate) {
          if (accumulated_.size() == 0) accumulated_ = Vector::Zero(g.size());
          accumulated_ += g;
          ++accumulated_count_;
        } else {
          Vector p = policy_->parameters();
          adam_update(*adam_, p, g);
          policy_->set_parameters(p);
        }
        ++stats_.updates;
      } catch (const GradientFailure&) {
        ++stats_.skipped_gradient;
        rep.skipped = true;
      } catch (const NumericalError&) {
        ++stats_.skipped_gradient;
        rep.skipped = true;
      }
    }
  }

  last_ = std::move(sol);
  last_weights_ = weights;
  return rep;
}

void MheEstimator::flush() {
  if (!config_.accumulate || accumulated_count_ == 0) return;
  Vector p = policy_->parameters();
  adam_update(*adam_, p, accumulated_ / static_cast<double>(accumulated_count_));
  policy_->set_parameters(p);
  accumulated_.setZero();
  accumulated_count_ = 0;
}

Checkpoint to_checkpoint(const WeightPolicy& policy, std::uint64_t seed) {
  Checkpoint ck;
  ck.seed = seed;
  ck.floor = policy.floor();
  ck.r_fixed = policy.r_fixed();
  ck.r_floor = policy.r_floor();
  if (policy.is_neural()) {
    ck.params = policy.mlp();
    ck.standardizer = policy.standardizer();
  } else {
    ck.fixed = true;
    ck.params = MlpParams::zeros(policy.layout().ny, 1, 1, policy.layout().size());
    ck.params.bo = policy.raw_fixed();
  }
  return ck;
}

WeightPolicy policy_from_checkpoint(const Checkpoint& ck, const WeightLayout& layout) {
  ck.params.validate();
  if (ck.params.output_dim() != layout.size()) {
    throw ConfigError("checkpoint output size " + std::to_string(ck.params.output_dim()) + " does not match " +
                      std::to_string(layout.size()) + " weights");
  }
  if (ck.fixed) return WeightPolicy::fixed(ck.params.bo, layout, ck.floor, ck.r_fixed, ck.r_floor);
  if (ck.params.input_dim() != layout.ny) {
    throw ConfigError("checkpoint input size " + std::to_string(ck.params.input_dim()) + " does not match " +
                      std::to_string(layout.ny) + " measurements");
  }
  return WeightPolicy::neural(ck.params, layout, ck.standardizer, ck.floor, ck.r_fixed, ck.r_floor);
}

EpisodeResult run_episode_rl(const sim::Scenario& scenario, WeightPolicy& policy, AdamState& adam,
                             const RlHyper& hyper, std::uint64_t seed) {
  hyper.loss.validate();
  if (hyper.loss.kind != LossSpec::Kind::kTracking) throw ConfigError("closed-loop training uses the tracking loss");
  EstimatorConfig cfg = hyper.estimator;
  cfg.dt = scenario.dt;
  const int steps = scenario.steps();
  VectorSeq reference(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) reference[k] = scenario.reference(k * scenario.dt).stacked();

  const LossSpec spec = hyper.loss;
  WindowLoss loss = [&reference, spec](const MheSolution& sol, int newest) {
    const int n = static_cast<int>(sol.xs.size()) - 1;
    VectorSeq ref;
    for (int k = 0; k <= n; ++k) ref.push_back(reference.at(static_cast<std::size_t>(newest - n + k)));
    return tracking_loss(sol, ref, spec);
  };

  const quad::QuadrotorModel model(scenario.vehicle);
  MheEstimator est(model, policy, cfg, loss, cfg.learn ? &adam : nullptr);
  EpisodeResult out;
  out.trace = sim::run_closed_loop(scenario, &est, hyper.gains, seed);
  est.flush();
  out.stats = est.stats();
  out.mean_loss = out.stats.mean_loss();
  return out;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, const std::string& config_hash) {
  os << "# config_hash=" << config_hash << "\n";
  os << "episode,step,L,L_mean,kkt_residual,skip_count\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.episode << ',' << r.step << ',' << r.loss << ',' << r.mean_loss << ',' << r.kkt << ',' << r.skipped << "\n";
  }
}

RlTrainResult train_rl(const sim::Scenario& scenario, WeightPolicy& policy, const RlHyper& hyper, int max_episodes,
                       std::uint64_t seed, double tolerance, int patience,
                       const std::function<void(const MetricsRow&)>& on_episode, std::uint64_t seed_stride) {
  if (max_episodes < 1) throw ConfigError("episodes must be >= 1");
  if (!(tolerance > 0.0) || patience < 1) throw ConfigError("invalid convergence test settings");
  RlHyper h = hyper;
  h.estimator.learn = true;
  AdamState adam(static_cast<int>(policy.parameters().size()), h.estimator.adam);
  RlTrainResult out;
  long total_steps = 0;
  int calm = 0;
  for (int e = 0; e < max_episodes; ++e) {
    EpisodeResult ep = run_episode_rl(scenario, policy, adam, h, seed + static_cast<std::uint64_t>(e) * seed_stride);
    total_steps += static_cast<long>(ep.trace.steps.size());
    MetricsRow row;
    row.episode = e + 1;
    row.step = total_steps;
    row.loss = ep.trace.steps.empty() ? 0.0 : ep.trace.steps.back().loss;
    row.mean_loss = ep.mean_loss;
    row.kkt = ep.stats.max_kkt;
    row.skipped = ep.stats.skipped();
    out.metrics.push_back(row);
    out.mean_losses.push_back(ep.mean_loss);
    if (on_episode) on_episode(row);
    if (ep.trace.aborted) {
      out.aborted = true;
      out.diagnostic = "episode " + std::to_string(e + 1) + ": " + ep.trace.diagnostic;
    }
    if (e > 0) {
      const double prev = out.mean_losses[e - 1];
      const double rel = std::abs(ep.mean_loss - prev) / std::max(std::abs(prev), 1e-300);
      calm = rel < tolerance ? calm + 1 : 0;
      if (calm >= patience) {
        out.converged = true;
        break;
      }
    }
  }
  return out;
}

namespace {

std::vector<Vector6> dataset_truth(const sim::FlightDataset& data, const quad::VehicleParams& params) {
  std::vector<Vector6> truth;
  truth.reserve(data.rows.size());
  for (std::size_t i = 0; i < data.rows.size(); ++i) truth.push_back(data.disturbance(i, params));
  return truth;
}

void check_dataset_dt(const sim::FlightDataset& data, const EstimatorConfig& cfg) {
  if (data.rows.size() > 1 && std::abs(data.dt_mean - cfg.dt) > 0.1 * cfg.dt) {
    throw ConfigError("estimator dt " + std::to_string(cfg.dt) + " does not match the dataset spacing " +
                      std::to_string(data.dt_mean));
  }
}

template <class F>
void feed_dataset(const sim::FlightDataset& data, MheEstimator& est, F&& on_report) {
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    const Vector u_prev = i > 0 ? data.control(i - 1) : Vector();
    on_report(est.update(data.measurement(i), u_prev, static_cast<int>(i)));
  }
}

}  // namespace

SupervisedResult train_supervised(const sim::FlightDataset& data, WeightPolicy& policy, const SupervisedHyper& hyper,
                                  const quad::VehicleParams& params,
                                  const std::function<void(int, const WeightPolicy&)>& on_epoch) {
  hyper.loss.validate();
  if (hyper.loss.kind != LossSpec::Kind::kEstimation) throw ConfigError("supervised training uses the estimation loss");
  if (hyper.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (data.rows.empty()) throw ConfigError("empty dataset");
  EstimatorConfig cfg = hyper.estimator;
  cfg.learn = true;
  check_dataset_dt(data, cfg);
  const std::vector<Vector6> truth = dataset_truth(data, params);
  const LossSpec spec = hyper.loss;
  WindowLoss loss = [&truth, spec](const MheSolution& sol, int newest) {
    const int n = static_cast<int>(sol.xs.size()) - 1;
    std::vector<Vector6> t(truth.begin() + (newest - n), truth.begin() + newest + 1);
    return estimation_loss(sol, t, spec);
  };

  const quad::QuadrotorModel model(params);
  AdamState adam(static_cast<int>(policy.parameters().size()), cfg.adam);
  SupervisedResult out;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    MheEstimator est(model, policy, cfg, loss, &adam);
    feed_dataset(data, est, [](const sim::EstimatorReport&) {});
    est.flush();
    out.epoch_loss.push_back(est.stats().mean_loss());
    out.last_stats = est.stats();
    if (on_epoch) on_epoch(epoch + 1, policy);
  }
  return out;
}

DatasetRun replay_dataset(const sim::FlightDataset& data, const WeightPolicy& policy, const EstimatorConfig& config,
                          const quad::VehicleParams& params) {
  EstimatorConfig cfg = config;
  cfg.learn = false;
  check_dataset_dt(data, cfg);
  WeightPolicy copy = policy;
  const quad::QuadrotorModel model(params);
  MheEstimator est(model, copy, cfg);
  DatasetRun out;
  out.truth = dataset_truth(data, params);
  feed_dataset(data, est, [&out](const sim::EstimatorReport& r) { out.estimates.push_back(r.x_hat); });
  out.stats = est.stats();
  return out;
}

}  // namespace neuromhe::train
