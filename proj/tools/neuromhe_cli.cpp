#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "neuromhe/config.hpp"
#include "neuromhe/eval.hpp"
#include "neuromhe/validate.hpp"

using namespace neuromhe;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Command-line values that override the config file when given.
struct Overrides {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
  std::optional<std::string> scenario;
  std::optional<std::string> mode;
  std::optional<std::string> policy;
  std::optional<int> episodes;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> baseline;
  std::optional<int> instances;
  std::optional<int> reps;
  std::optional<int> dense_reps;
  std::optional<std::string> dataset_out;
  bool corrupt = false;
};

config::RunConfig resolve(const Overrides& o, bool checkpoint_is_eval) {
  config::RunConfig c = o.config_file.empty() ? config::RunConfig{}
                                              : config::load_config(config::resolve_config_path(o.config_file));
  if (o.seed) c.seed = *o.seed;
  if (o.jobs) c.jobs = *o.jobs;
  if (o.out) c.output_dir = *o.out;
  if (o.scenario) c.scenario = *o.scenario;
  if (o.mode) {
    if (*o.mode == "rl") c.mode = config::TrainMode::kRl;
    else if (*o.mode == "supervised") c.mode = config::TrainMode::kSupervised;
    else throw ConfigError("--mode must be rl or supervised");
  }
  if (o.policy) {
    if (*o.policy == "neural") c.policy = config::PolicyKind::kNeural;
    else if (*o.policy == "fixed") c.policy = config::PolicyKind::kFixed;
    else throw ConfigError("--policy must be neural or fixed");
  }
  if (o.episodes) {
    c.episodes = *o.episodes;
    c.eval_episodes = *o.episodes;
  }
  if (o.data) {
    c.data = *o.data;
    c.eval_data = *o.data;
  }
  if (o.checkpoint) (checkpoint_is_eval ? c.eval_checkpoint : c.checkpoint) = *o.checkpoint;
  if (o.instances) c.gc_instances = *o.instances;
  if (o.reps) c.bench_kf_reps = *o.reps;
  if (o.dense_reps) c.bench_dense_reps = *o.dense_reps;
  if (o.corrupt) c.gc_corrupt = true;
  c.validate();
  // Fails early with "unknown scenario" before any work starts.
  config::build_scenario(c);
  return c;
}

std::string out_path(const config::RunConfig& c, const std::string& name) {
  const fs::path p(name);
  if (p.is_absolute()) return name;
  fs::create_directories(c.output_dir);
  return (fs::path(c.output_dir) / p).string();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  return os;
}

train::WeightPolicy load_policy(const std::string& path) {
  if (path.empty()) throw ConfigError("a checkpoint is required (--checkpoint)");
  return train::policy_from_checkpoint(load_checkpoint(path), WeightLayout{quad::kStateDim, quad::kMeasDim,
                                                                           quad::kNoiseDim});
}

sim::FlightDataset load_dataset(const config::RunConfig& c, const std::string& path) {
  const double dt = c.dt.value_or(2.5e-3);
  sim::FlightDataset data = sim::load_flight_dataset(path, dt, 0.1 * dt);
  std::cout << "dataset: " << data.summary() << "\n";
  return data;
}

int cmd_train(const config::RunConfig& c) {
  const std::string hash = config::config_hash(c);
  const std::string ckpt_path = out_path(c, c.checkpoint);
  const std::string metrics_path = out_path(c, c.metrics);
  const std::uint64_t seed = c.seed;
  if (c.mode == config::TrainMode::kSupervised) {
    if (c.data.empty()) throw ConfigError("supervised training needs a dataset (--data)");
    const sim::FlightDataset data = load_dataset(c, c.data);
    std::optional<Standardizer> st;
    if (c.standardize) st = config::dataset_standardizer(data);
    train::WeightPolicy policy = config::build_policy(c, st);
    train::SupervisedHyper hyper = config::build_supervised_hyper(c);
    hyper.estimator.dt = data.dt_mean;
    auto metrics = open_out(metrics_path);
    metrics << "# config_hash=" << hash << "\nepoch,L_mean,skip_count\n";
    const auto result = train::train_supervised(data, policy, hyper, c.vehicle, [&](int epoch, const train::WeightPolicy& p) {
      save_checkpoint(ckpt_path, train::to_checkpoint(p, seed));
      std::cout << fmt::format("epoch {} saved\n", epoch);
    });
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
      metrics << e + 1 << ',' << fmt::format("{}", result.epoch_loss[e]) << ','
              << (e + 1 == result.epoch_loss.size() ? result.last_stats.skipped() : 0) << "\n";
    }
    std::cout << fmt::format("final L_mean {:.6g}\ncheckpoint {}\nmetrics {}\n", result.epoch_loss.back(), ckpt_path,
                             metrics_path);
    return kExitOk;
  }

  const sim::Scenario scenario = config::build_scenario(c);
  std::optional<Standardizer> st;
  if (c.standardize) st = config::reference_standardizer(scenario);
  train::WeightPolicy policy = config::build_policy(c, st);
  train::RlHyper hyper = config::build_rl_hyper(c);
  std::vector<train::MetricsRow> rows;
  const auto result = train::train_rl(
      scenario, policy, hyper, c.episodes, seed, c.tolerance, c.patience,
      [&](const train::MetricsRow& row) {
        rows.push_back(row);
        auto metrics = open_out(metrics_path);
        train::write_metrics_csv(metrics, rows, hash);
        save_checkpoint(ckpt_path, train::to_checkpoint(policy, seed));
        std::cout << fmt::format("episode {:3d}  L_mean {:.6g}  max kkt {:.3g}  skipped {}\n", row.episode,
                                 row.mean_loss, row.kkt, row.skipped);
      },
      c.vary_seed ? 1 : 0);
  std::cout << fmt::format("final L_mean {:.6g}{}\ncheckpoint {}\nmetrics {}\n", result.mean_losses.back(),
                           result.converged ? " (converged)" : "", ckpt_path, metrics_path);
  if (result.aborted) {
    std::cerr << "training aborted: " << result.diagnostic << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

void print_quartiles(const std::string& name, const std::vector<double>& v) {
  const eval::Quartiles q = eval::quartiles(v);
  std::cout << fmt::format("  {:<10} median {:.5g}  q1 {:.5g}  q3 {:.5g}\n", name, q.median, q.q1, q.q3);
}

template <class Fn>
std::vector<double> pick(const std::vector<eval::EpisodeMetrics>& rows, Fn fn) {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(fn(r));
  return out;
}

int cmd_evaluate(const config::RunConfig& c, const std::optional<std::string>& baseline) {
  const std::string hash = config::config_hash(c);
  const train::WeightPolicy policy = load_policy(c.eval_checkpoint);
  if (!c.eval_data.empty()) {
    const sim::FlightDataset data = load_dataset(c, c.eval_data);
    train::EstimatorConfig ec = config::build_estimator_config(c);
    ec.dt = data.dt_mean;
    const train::DatasetRun run = train::replay_dataset(data, policy, ec, c.vehicle);
    std::vector<Vector6> est;
    for (const auto& x : run.estimates) {
      Vector6 e;
      e << x.segment<3>(quad::kDistForce), x.segment<3>(quad::kDistTorque);
      est.push_back(e);
    }
    const eval::DisturbanceRmse d = eval::disturbance_rmse(est, run.truth);
    std::cout << fmt::format("disturbance RMSE  fxy {:.5g}  fz {:.5g}  txy {:.5g}  tz {:.5g}  f {:.5g}  tau {:.5g}\n",
                             d.fxy, d.fz, d.txy, d.tz, d.f, d.tau);
    const std::string trace_path = out_path(c, c.trace_csv);
    auto os = open_out(trace_path);
    os << "# config_hash=" << hash << "\nt,dfx_true,dfy_true,dfz_true,dtx_true,dty_true,dtz_true,dfx_est,dfy_est,"
          "dfz_est,dtx_est,dty_est,dtz_est\n";
    for (std::size_t i = 0; i < est.size(); ++i) {
      os << fmt::format("{}", data.rows[i].t);
      for (int j = 0; j < 6; ++j) os << ',' << fmt::format("{}", run.truth[i][j]);
      for (int j = 0; j < 6; ++j) os << ',' << fmt::format("{}", est[i][j]);
      os << "\n";
    }
    std::cout << "trace " << trace_path << "\n";
    return kExitOk;
  }

  sim::Scenario scenario = config::build_scenario(c);
  scenario.sigma_on_reference = c.eval_sigma_on_reference;
  const train::RlHyper hyper = config::build_rl_hyper(c);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < c.eval_episodes; ++i) seeds.push_back(c.eval_seed_base + static_cast<std::uint64_t>(i));
  const auto rows = eval::evaluate_episodes(scenario, policy, hyper, seeds, c.jobs);
  const std::string csv = out_path(c, c.episodes_csv);
  {
    auto os = open_out(csv);
    eval::write_episode_csv(os, rows, hash);
  }
  std::cout << fmt::format("{} episodes on '{}'\n", rows.size(), scenario.name);
  print_quartiles("rmse px", pick(rows, [](const auto& r) { return r.tracking.axis[0]; }));
  print_quartiles("rmse py", pick(rows, [](const auto& r) { return r.tracking.axis[1]; }));
  print_quartiles("rmse pz", pick(rows, [](const auto& r) { return r.tracking.axis[2]; }));
  print_quartiles("rmse dfxy", pick(rows, [](const auto& r) { return r.disturbance.fxy; }));
  print_quartiles("rmse dfz", pick(rows, [](const auto& r) { return r.disturbance.fz; }));
  print_quartiles("rmse dtxy", pick(rows, [](const auto& r) { return r.disturbance.txy; }));
  print_quartiles("rmse dtz", pick(rows, [](const auto& r) { return r.disturbance.tz; }));
  print_quartiles("rmse df", pick(rows, [](const auto& r) { return r.disturbance.f; }));
  print_quartiles("rmse dtau", pick(rows, [](const auto& r) { return r.disturbance.tau; }));
  long aborted = 0;
  for (const auto& r : rows) aborted += r.aborted ? 1 : 0;
  if (aborted) std::cout << aborted << " episodes aborted\n";

  if (baseline) {
    const train::WeightPolicy base = load_policy(*baseline);
    const auto brows = eval::evaluate_episodes(scenario, base, hyper, seeds, c.jobs);
    auto rate = [&](auto fn) { return eval::p_rate(eval::median(pick(brows, fn)), eval::median(pick(rows, fn))); };
    std::cout << fmt::format("p_rate vs baseline  pz {:.2f}%  dfz {:.2f}%  dfxy {:.2f}%\n",
                             rate([](const auto& r) { return r.tracking.axis[2]; }),
                             rate([](const auto& r) { return r.disturbance.fz; }),
                             rate([](const auto& r) { return r.disturbance.fxy; }));
  }

  train::WeightPolicy local = policy;
  train::RlHyper h = hyper;
  h.estimator.learn = false;
  train::AdamState adam(static_cast<int>(local.parameters().size()), h.estimator.adam);
  const auto first = train::run_episode_rl(scenario, local, adam, h, seeds.front());
  const std::string trace_path = out_path(c, c.trace_csv);
  first.trace.write_csv(trace_path, hash);
  std::cout << "episodes " << csv << "\ntrace " << trace_path << "\n";
  return kExitOk;
}

int cmd_gradcheck(const config::RunConfig& c) {
  bool ok = true;
  auto line = [&](const std::string& name, double value, double limit) {
    const bool pass = std::isfinite(value) && value < limit;
    ok = ok && pass;
    std::cout << fmt::format("{}: max rel err {:.3e} < {:g}: {}\n", name, value, limit, pass ? "PASS" : "FAIL");
  };
  const validate::OracleReport rep =
      validate::kf_vs_dense(c.gc_instances, c.seed, c.gc_max_horizon, c.jobs, c.gc_corrupt);
  std::cout << fmt::format("{} instances, horizons 0..{}, state dims 4 and 24, {} gradient failures\n", rep.instances,
                           c.gc_max_horizon, rep.gradient_failures);
  if (rep.gradient_failures > 0) ok = false;
  line("KF vs dense", rep.max_rel_err, c.gc_tolerance);
  const auto fd = validate::finite_difference_columns(c.gc_fd_horizon, c.seed, c.gc_fd_step, c.jobs);
  line(fmt::format("finite differences (N={}, {} columns)", c.gc_fd_horizon, fd.size()),
       *std::max_element(fd.begin(), fd.end()), c.gc_fd_tolerance);
  const validate::InductionReport ind = validate::induction_checks(c.seed);
  line("N=1 closed form", ind.single_point_err, 1e-12);
  line("N=2 correction relation", ind.two_point_err, 1e-10);
  std::cout << (ok ? "gradcheck PASS\n" : "gradcheck FAIL\n");
  return ok ? kExitOk : kExitRuntime;
}

int cmd_bench(const config::RunConfig& c) {
  const std::string hash = config::config_hash(c);
  const auto rows = validate::time_gradients(c.bench_horizons, c.bench_kf_reps, c.bench_dense_reps, c.seed);
  const std::string csv = out_path(c, c.bench_csv);
  auto os = open_out(csv);
  os << "# config_hash=" << hash << "\nhorizon,method,median_ms\n";
  std::vector<double> n, kf;
  for (const auto& r : rows) {
    os << r.horizon << ",kf," << fmt::format("{}", r.kf_ms) << "\n";
    if (c.bench_dense_reps > 0) os << r.horizon << ",dense," << fmt::format("{}", r.dense_ms) << "\n";
    n.push_back(r.horizon);
    kf.push_back(r.kf_ms);
  }
  std::cout << fmt::format("{:>8} {:>12} {:>12} {:>10} {:>10}\n", "horizon", "kf ms", "dense ms", "kf ratio",
                           "dense ratio");
  for (const auto& r : rows) {
    std::cout << fmt::format("{:>8} {:>12.4f} {:>12.4f} {:>10.2f} {:>10.2f}\n", r.horizon, r.kf_ms, r.dense_ms,
                             r.kf_ms / rows.front().kf_ms, r.dense_ms / rows.front().dense_ms);
  }
  if (rows.size() >= 2) std::cout << fmt::format("kf linear fit R^2 {:.4f}\n", eval::linear_fit(n, kf).r2);
  std::cout << "csv " << csv << "\n";
  return kExitOk;
}

int cmd_simulate(const config::RunConfig& c, const std::optional<std::string>& dataset_out) {
  const std::string hash = config::config_hash(c);
  const sim::Scenario scenario = config::build_scenario(c);
  if (dataset_out) {
    const auto [data, truth] = sim::generate_dataset(scenario, c.gains, c.seed);
    const std::string path = out_path(c, *dataset_out);
    sim::write_flight_dataset(path, data, hash);
    std::cout << "dataset " << path << " (" << data.summary() << ")\n";
    return kExitOk;
  }
  sim::TraceLog trace;
  if (c.eval_checkpoint.empty()) {
    trace = sim::run_closed_loop(scenario, nullptr, c.gains, c.seed);
  } else {
    train::WeightPolicy policy = load_policy(c.eval_checkpoint);
    train::RlHyper h = config::build_rl_hyper(c);
    h.estimator.learn = false;
    train::AdamState adam(static_cast<int>(policy.parameters().size()), h.estimator.adam);
    trace = train::run_episode_rl(scenario, policy, adam, h, c.seed).trace;
  }
  const std::string path = out_path(c, c.trace_csv);
  trace.write_csv(path, hash);
  const eval::TrackingRmse t = eval::tracking_rmse(trace);
  std::cout << fmt::format("{} steps, tracking RMSE x {:.4g} y {:.4g} z {:.4g}{}\ntrace {}\n", trace.steps.size(),
                           t.axis[0], t.axis[1], t.axis[2], trace.aborted ? " (aborted: " + trace.diagnostic + ")" : "",
                           path);
  return trace.aborted ? kExitRuntime : kExitOk;
}

// Per-step weights next to the disturbance noise level that generated the
// flight, for plotting how the network adapts along the trajectory.
class RecordingEstimator : public sim::EstimatorHandle {
 public:
  explicit RecordingEstimator(train::MheEstimator& inner) : inner_(inner) {}
  sim::EstimatorReport update(const Vector& y, const Vector& u_prev, int step) override {
    sim::EstimatorReport r = inner_.update(y, u_prev, step);
    weights.push_back(inner_.last_weights());
    return r;
  }
  std::vector<WeightSpec> weights;

 private:
  train::MheEstimator& inner_;
};

int cmd_export(const config::RunConfig& c) {
  const std::string hash = config::config_hash(c);
  sim::Scenario scenario = config::build_scenario(c);
  scenario.sigma_on_reference = c.eval_sigma_on_reference;
  train::WeightPolicy policy = load_policy(c.eval_checkpoint);
  train::EstimatorConfig ec = config::build_estimator_config(c);
  ec.dt = scenario.dt;
  ec.learn = false;
  const quad::QuadrotorModel model(scenario.vehicle);
  train::MheEstimator est(model, policy, ec);
  RecordingEstimator rec(est);
  const sim::TraceLog trace = sim::run_closed_loop(scenario, &rec, c.gains, c.seed);

  const std::string trace_path = out_path(c, c.trace_csv);
  trace.write_csv(trace_path, hash);
  const std::string weights_path = out_path(c, "weights.csv");
  auto os = open_out(weights_path);
  os << "# config_hash=" << hash << "\nt,gamma1,gamma2";
  for (int i = 1; i <= quad::kNoiseDim; ++i) os << ",q" << i;
  for (int i = 1; i <= quad::kMeasDim; ++i) os << ",r" << i;
  for (int i = 1; i <= 6; ++i) os << ",sigma" << i;
  os << "\n";
  for (std::size_t k = 0; k < rec.weights.size() && k < trace.steps.size(); ++k) {
    const WeightSpec& w = rec.weights[k];
    os << fmt::format("{},{},{}", trace.steps[k].t, w.gamma1, w.gamma2);
    for (int i = 0; i < w.Q.size(); ++i) os << ',' << fmt::format("{}", w.Q[i]);
    for (int i = 0; i < w.R.size(); ++i) os << ',' << fmt::format("{}", w.R[i]);
    const Vector6 sigma = scenario.disturbance.sigma(trace.steps[k].x_true);
    for (int i = 0; i < 6; ++i) os << ',' << fmt::format("{}", sigma[i]);
    os << "\n";
  }
  std::cout << "trace " << trace_path << "\nweights " << weights_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural moving horizon estimation: training, evaluation and gradient checks"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("-c,--config", o.config_file, "INI config file (also searched in NEUROMHE_CONFIG_DIR)");
  app.add_option("--seed", o.seed, "Random seed");
  app.add_option("--jobs", o.jobs, "Worker threads for independent episodes and oracle instances")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", o.out, "Output directory");

  auto* train_cmd = app.add_subcommand("train", "Train a weighting policy (rl or supervised)");
  train_cmd->add_option("--mode", o.mode, "rl or supervised");
  train_cmd->add_option("--scenario", o.scenario, "Scenario name");
  train_cmd->add_option("--policy", o.policy, "neural or fixed");
  train_cmd->add_option("--episodes", o.episodes, "Maximum training episodes");
  train_cmd->add_option("--data", o.data, "Flight dataset CSV for supervised training");
  train_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint output path");

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on seeded episodes or a dataset");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");
  eval_cmd->add_option("--baseline", o.baseline, "Second checkpoint; prints p_rate against it");
  eval_cmd->add_option("--scenario", o.scenario, "Scenario name");
  eval_cmd->add_option("--episodes", o.episodes, "Evaluation episodes");
  eval_cmd->add_option("--data", o.data, "Flight dataset CSV");

  auto* gc_cmd = app.add_subcommand("gradcheck", "Check the Kalman-filter gradient against its oracles");
  gc_cmd->add_option("--instances", o.instances, "Random instances for the dense comparison");
  gc_cmd->add_flag("--corrupt-coefficient", o.corrupt, "Perturb one coefficient on the filter path (negative control)");

  auto* bench_cmd = app.add_subcommand("bench-grad", "Time the gradient solvers across horizons");
  bench_cmd->add_option("--reps", o.reps, "Repetitions per horizon for the Kalman-filter solver");
  bench_cmd->add_option("--dense-reps", o.dense_reps, "Repetitions per horizon for the dense solver (0 skips it)");

  auto* sim_cmd = app.add_subcommand("simulate", "Fly one closed-loop episode or generate a flight dataset");
  sim_cmd->add_option("--scenario", o.scenario, "Scenario name");
  sim_cmd->add_option("--checkpoint", o.checkpoint, "Estimator checkpoint (default: no estimator)");
  sim_cmd->add_option("--dataset", o.dataset_out, "Write a flight dataset CSV instead of a trace");

  auto* export_cmd = app.add_subcommand("export-plots-data", "Write per-step trace and weight CSVs for plotting");
  export_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint to run");
  export_cmd->add_option("--scenario", o.scenario, "Scenario name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const bool eval_ckpt = !train_cmd->parsed();
    const config::RunConfig cfg = resolve(o, eval_ckpt);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_evaluate(cfg, o.baseline);
    if (gc_cmd->parsed()) return cmd_gradcheck(cfg);
    if (bench_cmd->parsed()) return cmd_bench(cfg);
    if (sim_cmd->parsed()) return cmd_simulate(cfg, o.dataset_out);
    if (export_cmd->parsed()) return cmd_export(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
