#include "neuromhe/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace neuromhe::config {
namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& text, const std::string& name) {
  const std::string t = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("'" + name + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& name) {
  std::vector<T> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    if (!tok.empty() && tok.back() == ',') tok.pop_back();
    if (!tok.empty()) out.push_back(parse_number<T>(tok, name));
  }
  if (out.empty()) throw ConfigError("'" + name + "': empty list");
  return out;
}

bool parse_bool(const std::string& text, const std::string& name) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("'" + name + "': expected a boolean, got '" + text + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

class Registry {
 public:
  explicit Registry(RunConfig& c) : c_(c) { build(); }
  const std::vector<Field>& fields() const { return fields_; }

 private:
  template <class T>
  void number(const char* sec, const char* key, T& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key, [&ref, name](const std::string& v) { ref = parse_number<T>(v, name); },
                       [&ref] { return fmt::format("{}", ref); }});
  }
  void optional_number(const char* sec, const char* key, std::optional<double>& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key, [&ref, name](const std::string& v) { ref = parse_number<double>(v, name); },
                       [&ref] { return ref ? fmt::format("{}", *ref) : std::string("default"); }});
  }
  void boolean(const char* sec, const char* key, bool& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key, [&ref, name](const std::string& v) { ref = parse_bool(v, name); },
                       [&ref] { return fmt_bool(ref); }});
  }
  void optional_boolean(const char* sec, const char* key, std::optional<bool>& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key, [&ref, name](const std::string& v) { ref = parse_bool(v, name); },
                       [&ref] { return ref ? fmt_bool(*ref) : std::string("default"); }});
  }
  void text(const char* sec, const char* key, std::string& ref) {
    fields_.push_back({sec, key, [&ref](const std::string& v) { ref = trim(v); }, [&ref] { return ref; }});
  }
  void vec3(const char* sec, const char* key, Vector3& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key,
                       [&ref, name](const std::string& v) {
                         const auto l = parse_list<double>(v, name);
                         if (l.size() != 3) throw ConfigError("'" + name + "': expected 3 numbers");
                         ref = Vector3(l[0], l[1], l[2]);
                       },
                       [&ref] { return fmt::format("{} {} {}", ref[0], ref[1], ref[2]); }});
  }
  template <class T>
  void list(const char* sec, const char* key, std::vector<T>& ref) {
    const std::string name = std::string(sec) + "." + key;
    fields_.push_back({sec, key, [&ref, name](const std::string& v) { ref = parse_list<T>(v, name); },
                       [&ref] { return fmt::format("{}", fmt::join(ref, " ")); }});
  }

  void build() {
    number("run", "seed", c_.seed);
    number("run", "jobs", c_.jobs);
    text("run", "output_dir", c_.output_dir);

    text("scenario", "name", c_.scenario);
    optional_number("scenario", "duration", c_.duration);
    optional_number("scenario", "dt", c_.dt);
    number("scenario", "noise_std", c_.noise_std);
    optional_boolean("scenario", "sigma_on_reference", c_.sigma_on_reference);
    optional_number("scenario", "event_force", c_.event_force);

    number("vehicle", "mass", c_.vehicle.mass);
    fields_.push_back({"vehicle", "inertia",
                       [this](const std::string& v) {
                         const auto l = parse_list<double>(v, "vehicle.inertia");
                         if (l.size() != 3) throw ConfigError("'vehicle.inertia': expected 3 numbers");
                         c_.vehicle.inertia = Vector3(l[0], l[1], l[2]).asDiagonal();
                       },
                       [this] {
                         const Matrix3& J = c_.vehicle.inertia;
                         return fmt::format("{} {} {}", J(0, 0), J(1, 1), J(2, 2));
                       }});
    number("vehicle", "gravity", c_.vehicle.gravity);

    vec3("disturbance", "c_v", c_.disturbance.c_v);
    vec3("disturbance", "c_p", c_.disturbance.c_p);
    vec3("disturbance", "c_f", c_.disturbance.c_f);
    vec3("disturbance", "c_omega", c_.disturbance.c_omega);
    vec3("disturbance", "c_theta", c_.disturbance.c_theta);
    vec3("disturbance", "c_tau", c_.disturbance.c_tau);

    vec3("controller", "kp", c_.gains.kp);
    vec3("controller", "kv", c_.gains.kv);
    vec3("controller", "kr", c_.gains.kr);
    vec3("controller", "kw", c_.gains.kw);
    number("controller", "max_thrust", c_.gains.max_thrust);

    number("mhe", "horizon", c_.horizon);
    number("mhe", "tol", c_.solver.tol);
    number("mhe", "max_iterations", c_.solver.max_iterations);
    number("mhe", "lm_initial", c_.solver.lm_initial);
    number("mhe", "lm_min", c_.solver.lm_min);
    number("mhe", "lm_max", c_.solver.lm_max);
    number("mhe", "lm_factor", c_.solver.lm_factor);
    number("mhe", "armijo", c_.solver.armijo);
    number("mhe", "max_backtracks", c_.solver.max_backtracks);
    boolean("mhe", "exact_hessian", c_.solver.exact_hessian);
    number("mhe", "floor", c_.floor);
    number("mhe", "r_fixed", c_.r_fixed);
    number("mhe", "r_floor", c_.r_floor);
    list("mhe", "barrier_deltas", c_.barrier_deltas);

    fields_.push_back({"policy", "kind",
                       [this](const std::string& v) {
                         const std::string t = trim(v);
                         if (t == "neural") c_.policy = PolicyKind::kNeural;
                         else if (t == "fixed") c_.policy = PolicyKind::kFixed;
                         else throw ConfigError("'policy.kind': expected neural or fixed, got '" + t + "'");
                       },
                       [this] { return std::string(c_.policy == PolicyKind::kNeural ? "neural" : "fixed"); }});
    number("policy", "hidden1", c_.hidden1);
    number("policy", "hidden2", c_.hidden2);
    number("policy", "init_seed", c_.init_seed);
    number("policy", "output_scale", c_.output_scale);
    boolean("policy", "standardize", c_.standardize);
    number("policy", "p0", c_.p0);
    number("policy", "r0", c_.r0);
    number("policy", "q0", c_.q0);
    number("policy", "gamma1_0", c_.gamma1_0);
    number("policy", "gamma2_0", c_.gamma2_0);

    fields_.push_back({"train", "mode",
                       [this](const std::string& v) {
                         const std::string t = trim(v);
                         if (t == "rl") c_.mode = TrainMode::kRl;
                         else if (t == "supervised") c_.mode = TrainMode::kSupervised;
                         else throw ConfigError("'train.mode': expected rl or supervised, got '" + t + "'");
                       },
                       [this] { return std::string(c_.mode == TrainMode::kRl ? "rl" : "supervised"); }});
    number("train", "episodes", c_.episodes);
    optional_number("train", "lr", c_.lr);
    number("train", "beta1", c_.beta1);
    number("train", "beta2", c_.beta2);
    number("train", "adam_eps", c_.adam_eps);
    number("train", "tolerance", c_.tolerance);
    number("train", "patience", c_.patience);
    number("train", "epochs", c_.epochs);
    boolean("train", "vary_seed", c_.vary_seed);
    number("train", "loss_alpha", c_.loss_alpha);
    text("train", "data", c_.data);
    text("train", "checkpoint", c_.checkpoint);
    text("train", "metrics", c_.metrics);

    text("evaluate", "checkpoint", c_.eval_checkpoint);
    number("evaluate", "episodes", c_.eval_episodes);
    number("evaluate", "seed_base", c_.eval_seed_base);
    boolean("evaluate", "sigma_on_reference", c_.eval_sigma_on_reference);
    text("evaluate", "data", c_.eval_data);
    text("evaluate", "episodes_csv", c_.episodes_csv);
    text("evaluate", "trace_csv", c_.trace_csv);

    number("gradcheck", "instances", c_.gc_instances);
    number("gradcheck", "max_horizon", c_.gc_max_horizon);
    number("gradcheck", "fd_horizon", c_.gc_fd_horizon);
    number("gradcheck", "fd_step", c_.gc_fd_step);
    number("gradcheck", "tolerance", c_.gc_tolerance);
    number("gradcheck", "fd_tolerance", c_.gc_fd_tolerance);
    boolean("gradcheck", "corrupt", c_.gc_corrupt);

    list("bench", "horizons", c_.bench_horizons);
    number("bench", "kf_reps", c_.bench_kf_reps);
    number("bench", "dense_reps", c_.bench_dense_reps);
    text("bench", "csv", c_.bench_csv);
  }

  RunConfig& c_;
  std::vector<Field> fields_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void RunConfig::validate() const {
  require(jobs >= 1, "run.jobs must be >= 1");
  require(!duration || *duration > 0.0, "scenario.duration must be > 0");
  require(!dt || *dt > 0.0, "scenario.dt must be > 0");
  require(noise_std >= 0.0, "scenario.noise_std must be >= 0");
  vehicle.validate();
  disturbance.validate();
  gains.validate();
  require(horizon >= 1, "mhe.horizon must be >= 1");
  require(solver.tol > 0.0 && solver.max_iterations >= 1, "mhe.tol must be > 0 and mhe.max_iterations >= 1");
  require(solver.lm_min > 0.0 && solver.lm_min <= solver.lm_initial && solver.lm_initial <= solver.lm_max,
          "mhe damping bounds must satisfy 0 < lm_min <= lm_initial <= lm_max");
  require(solver.lm_factor > 1.0, "mhe.lm_factor must be > 1");
  require(solver.armijo > 0.0 && solver.armijo < 1.0, "mhe.armijo must be in (0, 1)");
  require(solver.max_backtracks >= 1, "mhe.max_backtracks must be >= 1");
  require(floor > 0.0, "mhe.floor must be > 0");
  require(r_fixed > 0.0, "mhe.r_fixed must be > 0");
  require(r_floor >= floor, "mhe.r_floor must be >= mhe.floor");
  for (double d : barrier_deltas) require(d > 0.0, "mhe.barrier_deltas must be > 0");
  require(hidden1 >= 1 && hidden2 >= 1, "policy hidden sizes must be >= 1");
  require(output_scale >= 0.0, "policy.output_scale must be >= 0");
  require(p0 > floor && q0 > floor && r0 > r_floor, "policy.p0, q0 must exceed mhe.floor and r0 mhe.r_floor");
  require(gamma1_0 > 0.0 && gamma1_0 < 1.0 && gamma2_0 > 0.0 && gamma2_0 < 1.0,
          "policy.gamma1_0 and gamma2_0 must be in (0, 1)");
  require(episodes >= 1, "train.episodes must be >= 1");
  require(!lr || *lr > 0.0, "train.lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0, "invalid Adam settings");
  require(tolerance > 0.0 && patience >= 1, "train.tolerance must be > 0 and train.patience >= 1");
  require(epochs >= 1, "train.epochs must be >= 1");
  require(loss_alpha > 0.0, "train.loss_alpha must be > 0");
  require(eval_episodes >= 1, "evaluate.episodes must be >= 1");
  require(gc_instances >= 1 && gc_max_horizon >= 0 && gc_fd_horizon >= 0, "invalid gradcheck sizes");
  require(gc_fd_step > 0.0 && gc_tolerance > 0.0 && gc_fd_tolerance > 0.0, "invalid gradcheck tolerances");
  require(!bench_horizons.empty(), "bench.horizons must not be empty");
  for (int n : bench_horizons) require(n >= 1, "bench.horizons must be >= 1");
  require(bench_kf_reps >= 1 && bench_dense_reps >= 0, "invalid bench repetition counts");
}

double RunConfig::learning_rate() const {
  if (lr) return *lr;
  return policy == PolicyKind::kNeural ? 1e-4 : 1e-3;
}

RunConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig cfg;
  Registry reg(cfg);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("unknown key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(reg.fields().begin(), reg.fields().end(),
                                   [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == reg.fields().end()) throw ConfigError("unknown key '" + section + "." + key + "'");
      it->set(value.data());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(is);
}

std::string resolve_config_path(const std::string& name) {
  namespace fs = std::filesystem;
  if (fs::exists(name)) return name;
  if (const char* dirs = std::getenv("NEUROMHE_CONFIG_DIR")) {
    std::istringstream is(dirs);
    std::string dir;
    while (std::getline(is, dir, ':')) {
      if (dir.empty()) continue;
      const fs::path p = fs::path(dir) / name;
      if (fs::exists(p)) return p.string();
    }
  }
  throw ConfigError("config '" + name + "' not found (searched the working directory and NEUROMHE_CONFIG_DIR)");
}

std::string canonical_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  Registry reg(copy);
  std::vector<std::string> lines;
  for (const auto& f : reg.fields()) lines.push_back(f.section + "." + f.key + "=" + f.get());
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : canonical_text(cfg)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

sim::Scenario build_scenario(const RunConfig& cfg) {
  sim::Scenario s = sim::make_scenario(cfg.scenario);
  if (cfg.duration) s.duration = *cfg.duration;
  if (cfg.dt) s.dt = *cfg.dt;
  if (cfg.sigma_on_reference) s.sigma_on_reference = *cfg.sigma_on_reference;
  if (cfg.event_force) s.event_force = *cfg.event_force;
  s.noise_std = cfg.noise_std;
  s.vehicle = cfg.vehicle;
  s.disturbance = cfg.disturbance;
  s.validate();
  return s;
}

train::EstimatorConfig build_estimator_config(const RunConfig& cfg) {
  train::EstimatorConfig e;
  e.horizon = cfg.horizon;
  e.dt = cfg.dt.value_or(e.dt);
  e.solver = cfg.solver;
  e.adam = {cfg.learning_rate(), cfg.beta1, cfg.beta2, cfg.adam_eps};
  return e;
}

train::RlHyper build_rl_hyper(const RunConfig& cfg) {
  train::RlHyper h;
  h.estimator = build_estimator_config(cfg);
  h.loss.alpha = cfg.loss_alpha;
  h.gains = cfg.gains;
  return h;
}

train::SupervisedHyper build_supervised_hyper(const RunConfig& cfg) {
  train::SupervisedHyper h;
  h.estimator = build_estimator_config(cfg);
  h.loss.alpha = cfg.loss_alpha;
  h.epochs = cfg.epochs;
  return h;
}

WeightSpec initial_weights(const RunConfig& cfg) {
  WeightSpec w;
  w.P = Vector::Constant(quad::kStateDim, cfg.p0);
  w.R = Vector::Constant(quad::kMeasDim, cfg.r0);
  w.R[0] = cfg.r_fixed;
  w.Q = Vector::Constant(quad::kNoiseDim, cfg.q0);
  w.gamma1 = cfg.gamma1_0;
  w.gamma2 = cfg.gamma2_0;
  return w;
}

namespace {
// Channels that barely move along the data (e.g. attitude entries near 0 or 1)
// are scaled by at least this much so their noise is not amplified.
constexpr double kMinInputScale = 1e-2;
}  // namespace

Standardizer reference_standardizer(const sim::Scenario& scenario) {
  VectorSeq ys;
  for (int k = 0; k < scenario.steps(); ++k) ys.push_back(scenario.reference(k * scenario.dt).stacked());
  return Standardizer::fit(ys, kMinInputScale);
}

Standardizer dataset_standardizer(const sim::FlightDataset& data) {
  VectorSeq ys;
  for (std::size_t i = 0; i < data.rows.size(); ++i) ys.push_back(data.measurement(i));
  return Standardizer::fit(ys, kMinInputScale);
}

train::WeightPolicy build_policy(const RunConfig& cfg, std::optional<Standardizer> standardizer) {
  const WeightSpec w = initial_weights(cfg);
  const Vector raw = weights_to_raw(w, cfg.floor, cfg.r_floor);
  if (cfg.policy == PolicyKind::kFixed) return train::WeightPolicy::fixed(raw, w.layout(), cfg.floor, cfg.r_fixed, cfg.r_floor);
  MlpParams p = MlpParams::init_uniform(quad::kMeasDim, cfg.hidden1, cfg.hidden2, w.layout().size(), cfg.init_seed,
                                        cfg.output_scale);
  p.bo = raw;
  return train::WeightPolicy::neural(p, w.layout(), standardizer, cfg.floor, cfg.r_fixed, cfg.r_floor);
}

}  // namespace neuromhe::config
