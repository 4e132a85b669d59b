#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "neuromhe/sim.hpp"
#include "neuromhe/train.hpp"

namespace neuromhe::config {

enum class PolicyKind { kNeural, kFixed };
enum class TrainMode { kRl, kSupervised };

// Every value the CLI consumes. Sections and keys are listed in the README;
// the defaults here are the documented defaults.
struct RunConfig {
  // [run]
  std::uint64_t seed = 1;
  int jobs = 1;
  std::string output_dir = ".";

  // [scenario] Unset optionals keep the named scenario's own values.
  std::string scenario = "fig8";
  std::optional<double> duration;
  std::optional<double> dt;
  double noise_std = 1e-3;
  std::optional<bool> sigma_on_reference;
  std::optional<double> event_force;

  quad::VehicleParams vehicle;     // [vehicle]
  sim::DisturbanceModel disturbance;  // [disturbance]
  sim::ControllerGains gains;      // [controller]

  // [mhe]
  int horizon = 10;
  MheOptions solver;
  double floor = 1e-4;
  double r_fixed = 100.0;
  double r_floor = 0.5;
  std::vector<double> barrier_deltas = {1e-2, 1e-4, 1e-6};

  // [policy]
  PolicyKind policy = PolicyKind::kNeural;
  int hidden1 = 50;
  int hidden2 = 50;
  std::uint64_t init_seed = 1;
  double output_scale = 0.01;
  bool standardize = true;
  double p0 = 1.0;
  double r0 = 1.0;
  double q0 = 1.0;
  double gamma1_0 = 0.5;
  double gamma2_0 = 0.5;

  // [train]
  TrainMode mode = TrainMode::kRl;
  int episodes = 10;
  std::optional<double> lr;  // default depends on the policy kind
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double tolerance = 1e-3;
  int patience = 3;
  int epochs = 5;
  bool vary_seed = true;
  double loss_alpha = 1.0;
  std::string data;
  std::string checkpoint = "checkpoint.txt";
  std::string metrics = "metrics.csv";

  // [evaluate]
  std::string eval_checkpoint;
  int eval_episodes = 20;
  std::uint64_t eval_seed_base = 1000;
  bool eval_sigma_on_reference = false;
  std::string eval_data;
  std::string episodes_csv = "episodes.csv";
  std::string trace_csv = "trace.csv";

  // [gradcheck]
  int gc_instances = 100;
  int gc_max_horizon = 10;
  int gc_fd_horizon = 3;
  double gc_fd_step = 1e-4;
  double gc_tolerance = 1e-8;
  double gc_fd_tolerance = 1e-4;
  bool gc_corrupt = false;

  // [bench]
  std::vector<int> bench_horizons = {10, 20, 40, 60, 80, 100};
  int bench_kf_reps = 20;
  int bench_dense_reps = 3;
  std::string bench_csv = "bench_grad.csv";

  // Throws ConfigError on out-of-range values.
  void validate() const;
  double learning_rate() const;
};

// Parses INI text. Unknown sections or keys, malformed numbers and invalid
// values raise ConfigError naming the offending key.
RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::string& path);

// A path that exists as given is used directly; otherwise each directory in
// the colon-separated NEUROMHE_CONFIG_DIR is tried in order.
std::string resolve_config_path(const std::string& name);

// Canonical "section.key=value" lines of every setting, sorted.
std::string canonical_text(const RunConfig& cfg);
// Hex FNV-1a of canonical_text.
std::string config_hash(const RunConfig& cfg);

sim::Scenario build_scenario(const RunConfig& cfg);
train::EstimatorConfig build_estimator_config(const RunConfig& cfg);
train::RlHyper build_rl_hyper(const RunConfig& cfg);
train::SupervisedHyper build_supervised_hyper(const RunConfig& cfg);
// Initial weights from [policy] p0, r0, q0, gamma1_0, gamma2_0.
WeightSpec initial_weights(const RunConfig& cfg);
// Input standardization fitted to the scenario's reference measurements or
// to the dataset's measurements.
Standardizer reference_standardizer(const sim::Scenario& scenario);
Standardizer dataset_standardizer(const sim::FlightDataset& data);
// Fresh policy of the configured kind whose initial output is initial_weights.
// A standardizer, when given, is attached to neural policies only.
train::WeightPolicy build_policy(const RunConfig& cfg, std::optional<Standardizer> standardizer = {});

}  // namespace neuromhe::config
