#include "neuromhe/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace neuromhe::eval {

double rmse(const std::vector<double>& errors) {
  if (errors.empty()) throw DomainError("RMSE of an empty sequence");
  double s = 0.0;
  for (double e : errors) s += e * e;
  return std::sqrt(s / static_cast<double>(errors.size()));
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("quantile of an empty sequence");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile level outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(const std::vector<double>& values) { return quantile(values, 0.5); }

Quartiles quartiles(const std::vector<double>& values) {
  return {quantile(values, 0.25), quantile(values, 0.5), quantile(values, 0.75)};
}

double p_rate(double median_baseline, double median_candidate) {
  if (!(median_baseline > 0.0)) throw DomainError("p_rate needs a positive baseline median");
  return (median_baseline - median_candidate) / median_baseline * 100.0;
}

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DomainError("linear fit needs two or more paired samples");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw DomainError("linear fit needs distinct x values");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (fit.slope * x[i] + fit.intercept);
    ss_res += r * r;
  }
  fit.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

DisturbanceRmse disturbance_rmse(const std::vector<Vector6>& estimate, const std::vector<Vector6>& truth) {
  if (estimate.size() != truth.size()) throw DomainError("estimate and truth have different lengths");
  if (estimate.empty()) throw DomainError("disturbance RMSE of an empty sequence");
  std::vector<double> fxy, fz, txy, tz, f, tau;
  for (std::size_t k = 0; k < estimate.size(); ++k) {
    const Vector6& e = estimate[k];
    const Vector6& t = truth[k];
    fxy.push_back(e.head<2>().norm() - t.head<2>().norm());
    fz.push_back(e[2] - t[2]);
    txy.push_back(e.segment<2>(3).norm() - t.segment<2>(3).norm());
    tz.push_back(e[5] - t[5]);
    f.push_back((e.head<3>() - t.head<3>()).norm());
    tau.push_back((e.tail<3>() - t.tail<3>()).norm());
  }
  return {rmse(fxy), rmse(fz), rmse(txy), rmse(tz), rmse(f), rmse(tau)};
}

TrackingRmse tracking_rmse(const sim::TraceLog& trace) {
  if (trace.steps.empty()) throw DomainError("tracking RMSE of an empty trace");
  Vector3 sq = Vector3::Zero();
  for (const auto& r : trace.steps) sq += (r.x_true.head<3>() - r.ref.p).cwiseAbs2();
  sq /= static_cast<double>(trace.steps.size());
  return {sq.cwiseSqrt(), std::sqrt(sq.sum())};
}

DisturbanceRmse trace_disturbance_rmse(const sim::TraceLog& trace) {
  std::vector<Vector6> est, truth;
  for (const auto& r : trace.steps) {
    Vector6 e, t;
    e << r.x_hat.segment<3>(quad::kDistForce), r.x_hat.segment<3>(quad::kDistTorque);
    t << r.x_true.segment<3>(quad::kDistForce), r.x_true.segment<3>(quad::kDistTorque);
    est.push_back(e);
    truth.push_back(t);
  }
  return disturbance_rmse(est, truth);
}

EpisodeMetrics summarize(const train::EpisodeResult& episode, std::uint64_t seed) {
  EpisodeMetrics m;
  m.seed = seed;
  m.mean_loss = episode.mean_loss;
  m.skipped = episode.stats.skipped();
  m.aborted = episode.trace.aborted;
  m.trace_hash = episode.trace.hash();
  if (!episode.trace.steps.empty()) {
    m.tracking = tracking_rmse(episode.trace);
    m.disturbance = trace_disturbance_rmse(episode.trace);
  }
  return m;
}

namespace {

EpisodeMetrics run_one(const sim::Scenario& scenario, const train::WeightPolicy& policy, const train::RlHyper& hyper,
                       std::uint64_t seed) {
  train::WeightPolicy local = policy;
  train::AdamState adam(static_cast<int>(local.parameters().size()), hyper.estimator.adam);
  return summarize(train::run_episode_rl(scenario, local, adam, hyper, seed), seed);
}

}  // namespace

std::vector<EpisodeMetrics> evaluate_episodes(const sim::Scenario& scenario, const train::WeightPolicy& policy,
                                              const train::RlHyper& hyper, const std::vector<std::uint64_t>& seeds,
                                              int jobs) {
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  train::RlHyper h = hyper;
  h.estimator.learn = false;
  std::vector<EpisodeMetrics> out(seeds.size());
  const auto n = static_cast<long>(seeds.size());
  if (jobs == 1) {
    for (long i = 0; i < n; ++i) out[i] = run_one(scenario, policy, h, seeds[i]);
    return out;
  }
  std::vector<std::string> errors(seeds.size());
#pragma omp parallel for schedule(dynamic) num_threads(jobs)
  for (long i = 0; i < n; ++i) {
    try {
      out[i] = run_one(scenario, policy, h, seeds[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (long i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw Error("episode with seed " + std::to_string(seeds[i]) + ": " + errors[i]);
  }
  return out;
}

void write_episode_csv(std::ostream& os, const std::vector<EpisodeMetrics>& rows, const std::string& config_hash) {
  os << "# config_hash=" << config_hash << "\n";
  os << "seed,rmse_px,rmse_py,rmse_pz,rmse_p,rmse_dfxy,rmse_dfz,rmse_dtxy,rmse_dtz,rmse_df,rmse_dt,L_mean,skip_count,"
        "aborted\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.seed << ',' << r.tracking.axis[0] << ',' << r.tracking.axis[1] << ',' << r.tracking.axis[2] << ','
       << r.tracking.norm << ',' << r.disturbance.fxy << ',' << r.disturbance.fz << ',' << r.disturbance.txy << ','
       << r.disturbance.tz << ',' << r.disturbance.f << ',' << r.disturbance.tau << ',' << r.mean_loss << ','
       << r.skipped << ',' << (r.aborted ? 1 : 0) << "\n";
  }
}

}  // namespace neuromhe::eval
