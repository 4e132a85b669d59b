#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "neuromhe/train.hpp"

namespace neuromhe::eval {

double rmse(const std::vector<double>& errors);

struct Quartiles {
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

// Linear interpolation between order statistics. Throws DomainError on empty input.
double quantile(std::vector<double> values, double q);
double median(const std::vector<double>& values);
Quartiles quartiles(const std::vector<double>& values);

// Relative improvement of the candidate median over the baseline median, in percent.
double p_rate(double median_baseline, double median_candidate);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

// Ordinary least squares y = slope x + intercept.
LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

// Disturbance estimation errors. fxy and txy compare the horizontal
// magnitudes sqrt(dx^2 + dy^2); f and tau use the norm of the 3-vector error.
struct DisturbanceRmse {
  double fxy = 0.0;
  double fz = 0.0;
  double txy = 0.0;
  double tz = 0.0;
  double f = 0.0;
  double tau = 0.0;
};

DisturbanceRmse disturbance_rmse(const std::vector<Vector6>& estimate, const std::vector<Vector6>& truth);

struct TrackingRmse {
  Vector3 axis = Vector3::Zero();
  double norm = 0.0;
};

TrackingRmse tracking_rmse(const sim::TraceLog& trace);
DisturbanceRmse trace_disturbance_rmse(const sim::TraceLog& trace);

struct EpisodeMetrics {
  std::uint64_t seed = 0;
  TrackingRmse tracking;
  DisturbanceRmse disturbance;
  double mean_loss = 0.0;
  long skipped = 0;
  bool aborted = false;
  std::uint64_t trace_hash = 0;
};

EpisodeMetrics summarize(const train::EpisodeResult& episode, std::uint64_t seed);

// Independent non-learning episodes, one per seed, each with its own copy
// of the policy. jobs == 1 runs the serial loop; otherwise an OpenMP loop
// with at most `jobs` threads. Results are ordered as `seeds`.
std::vector<EpisodeMetrics> evaluate_episodes(const sim::Scenario& scenario, const train::WeightPolicy& policy,
                                              const train::RlHyper& hyper, const std::vector<std::uint64_t>& seeds,
                                              int jobs = 1);

// Columns: seed, tracking RMSE per axis and norm, disturbance RMSEs, mean
// loss, skip count, abort flag.
void write_episode_csv(std::ostream& os, const std::vector<EpisodeMetrics>& rows, const std::string& config_hash);

}  // namespace neuromhe::eval
