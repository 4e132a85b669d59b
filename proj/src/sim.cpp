#include "neuromhe/sim.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace neuromhe::sim {

namespace {

void require_nonneg(const Vector3& c, const char* name) {
  if (!c.allFinite() || (c.array() < 0.0).any()) throw ConfigError(std::string("disturbance coefficient ") + name + " must be finite and >= 0");
}

void require_pos(const Vector3& c, const char* name) {
  if (!c.allFinite() || (c.array() <= 0.0).any()) throw ConfigError(std::string("controller gain ") + name + " must be finite and > 0");
}


Vector measurement_from_state(const quad::QuadState& s) { return s.stacked(); }

quad::QuadState state_from_measurement(const Vector& y) {
  quad::QuadState s;
  s.p = y.segment<3>(0);
  s.v = y.segment<3>(3);
  s.R = Eigen::Map<const Matrix3>(y.data() + 6);
  s.omega = y.segment<3>(15);
  return s;
}

double smoothstep(double t0, double t1, double t) {
  if (t <= t0) return 0.0;
  if (t >= t1) return 1.0;
  const double s = (t - t0) / (t1 - t0);
  return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}

void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
}

void hash_vector(std::uint64_t& h, const Vector& v) {
  const long n = v.size();
  hash_bytes(h, &n, sizeof n);
  if (n > 0) hash_bytes(h, v.data(), sizeof(double) * static_cast<std::size_t>(n));
}

void hash_double(std::uint64_t& h, double d) { hash_bytes(h, &d, sizeof d); }

}  // namespace

void DisturbanceModel::validate() const {
  require_nonneg(c_v, "c_v");
  require_nonneg(c_p, "c_p");
  require_nonneg(c_f, "c_f");
  require_nonneg(c_omega, "c_omega");
  require_nonneg(c_theta, "c_theta");
  require_nonneg(c_tau, "c_tau");
}

Vector6 DisturbanceModel::sigma(const Vector& x) const {
  const Vector3 p = x.segment<3>(quad::kPos);
  const Vector3 v = x.segment<3>(quad::kVel);
  const Vector3 om = x.segment<3>(quad::kOmega);
  const Vector3 ang = quad::euler_zyx(quad::orthonormalize(quad::rotation(x)));
  Vector6 s;
  s.head<3>() = c_v.cwiseProduct(v.cwiseAbs2()) + c_p.cwiseProduct(p.cwiseAbs2()) + c_f;
  s.tail<3>() = c_omega.cwiseProduct(om.cwiseAbs2()) + c_theta.cwiseProduct(ang.cwiseAbs2()) + c_tau;
  return s;
}

Vector6 sample_disturbance_step(const Vector6& d_prev, const Vector& x_true, const DisturbanceModel& model, double dt,
                                std::mt19937_64& rng) {
  const Vector6 sigma = model.sigma(x_true);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector6 d = d_prev;
  for (int i = 0; i < 6; ++i) {
    const double z = normal(rng);
    d[i] += dt * sigma[i] * z;
  }
  return d;
}

Vector Reference::stacked() const {
  quad::QuadState s;
  s.p = p;
  s.v = v;
  s.R = R;
  s.omega = omega;
  return s.stacked();
}

Matrix3 attitude_from_acceleration(const Vector3& a, double yaw, double gravity) {
  const Vector3 f = a + gravity * Vector3::UnitZ();
  const double fn = f.norm();
  const Vector3 b3 = fn > 1e-9 ? Vector3(f / fn) : Vector3::UnitZ();
  const Vector3 b1d(std::cos(yaw), std::sin(yaw), 0.0);
  Vector3 b2 = b3.cross(b1d);
  if (b2.norm() < 1e-9) b2 = b3.cross(Vector3::UnitX());
  b2.normalize();
  Matrix3 R;
  R.col(0) = b2.cross(b3);
  R.col(1) = b2;
  R.col(2) = b3;
  return R;
}

ReferenceFn reference_from_path(std::function<Vector3(double)> path, double gravity) {
  return [path = std::move(path), gravity](double t) {
    constexpr double h = 1e-3;   // position differences
    constexpr double ha = 4e-3;  // attitude differences
    auto accel = [&](double s) { return Vector3((path(s + h) - 2.0 * path(s) + path(s - h)) / (h * h)); };
    const Vector3 pm = path(t - h);
    const Vector3 p0 = path(t);
    const Vector3 pp = path(t + h);
    Reference r;
    r.p = p0;
    r.v = (pp - pm) / (2.0 * h);
    r.a = (pp - 2.0 * p0 + pm) / (h * h);
    r.R = attitude_from_acceleration(r.a, r.yaw, gravity);
    const Matrix3 Rm = attitude_from_acceleration(accel(t - ha), r.yaw, gravity);
    const Matrix3 Rp = attitude_from_acceleration(accel(t + ha), r.yaw, gravity);
    r.omega = quad::vee(r.R.transpose() * (Rp - Rm) / (2.0 * ha));
    // R^T Rddot = skew(omega)^2 + skew(alpha); the first term is symmetric.
    const Matrix3 second = r.R.transpose() * (Rp - 2.0 * r.R + Rm) / (ha * ha);
    r.alpha = quad::vee(0.5 * (second - second.transpose()));
    return r;
  };
}

void ControllerGains::validate() const {
  require_pos(kp, "kp");
  require_pos(kv, "kv");
  require_pos(kr, "kr");
  require_pos(kw, "kw");
  if (!(max_thrust > 0.0) || !std::isfinite(max_thrust)) throw ConfigError("controller max_thrust must be > 0");
}

Vector baseline_controller(const quad::QuadState& est, const Reference& ref, const Vector3& d_force_hat,
                           const ControllerGains& gains, const quad::VehicleParams& params,
                           const Vector3& d_torque_hat) {
  const double m = params.mass;
  const Vector3 z = Vector3::UnitZ();
  const Matrix3 R = quad::orthonormalize(est.R);

  const Vector3 e_p = est.p - ref.p;
  const Vector3 e_v = est.v - ref.v;
  const Vector3 F = -gains.kp.cwiseProduct(e_p) - gains.kv.cwiseProduct(e_v) + m * params.gravity * z + m * ref.a -
                    d_force_hat;

  Vector u(4);
  u[0] = std::clamp(F.dot(R * z), 0.0, gains.max_thrust);

  const Matrix3 Rd = attitude_from_acceleration(F / m - params.gravity * z, ref.yaw, params.gravity);
  const Matrix3 RtRd = R.transpose() * Rd;
  const Vector3 e_R = 0.5 * quad::vee(Rd.transpose() * R - R.transpose() * Rd);
  const Vector3 e_w = est.omega - RtRd * ref.omega;
  const Vector3 Jw = params.inertia * est.omega;
  u.tail<3>() = -gains.kr.cwiseProduct(e_R) - gains.kw.cwiseProduct(e_w) + est.omega.cross(Jw) +
                params.inertia * (RtRd * ref.alpha - est.omega.cross(RtRd * ref.omega)) - d_torque_hat;
  return u;
}

std::pair<Vector3, Vector3> ground_truth_disturbance(const Vector3& a_v, const Vector3& a_omega, const Matrix3& R,
                                                     const Vector3& omega, const quad::VehicleParams& params) {
  const Vector3 d_f = params.mass * R.transpose() * (a_v + params.gravity * Vector3::UnitZ());
  const Vector3 d_tau = params.inertia * a_omega + omega.cross(params.inertia * omega);
  return {d_f, d_tau};
}

Vector6 external_disturbance(const Vector3& a_v, const Vector3& a_omega, const Matrix3& R, const Vector3& omega,
                             const Vector& u, const quad::VehicleParams& params) {
  const auto [f_body, tau] = ground_truth_disturbance(a_v, a_omega, R, omega, params);
  Vector6 d;
  d.head<3>() = R * (f_body - u[0] * Vector3::UnitZ());
  d.tail<3>() = tau - u.tail<3>();
  return d;
}

void Scenario::validate() const {
  if (!(duration > 0.0) || !std::isfinite(duration)) throw ConfigError("scenario duration must be > 0");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("scenario dt must be > 0");
  if (!reference) throw ConfigError("scenario has no reference trajectory");
  if (!(noise_std >= 0.0)) throw ConfigError("scenario noise_std must be >= 0");
  if (!(divergence_bound > 0.0)) throw ConfigError("scenario divergence_bound must be > 0");
  disturbance.validate();
  vehicle.validate();
}

Vector6 Scenario::scripted_disturbance(double t) const {
  Vector6 d = Vector6::Zero();
  switch (mode) {
    case DisturbanceMode::kPayloadStep:
      if (t >= event_start) d[2] = event_force;
      break;
    case DisturbanceMode::kDownwashPulse:
      if (t >= event_start && t < event_end) d[2] = event_force;
      break;
    case DisturbanceMode::kStepSinusoid: {
      constexpr double two_pi = 2.0 * std::numbers::pi;
      d[0] = 0.6 * std::sin(two_pi * 0.5 * t);
      d[1] = 0.4 * std::cos(two_pi * 0.7 * t);
      d[2] = 0.5 * std::sin(two_pi * 0.8 * t) + (t >= event_start ? event_force : 0.0);
      d[3] = 2e-3 * std::sin(two_pi * 0.6 * t);
      d[4] = 2e-3 * std::cos(two_pi * 0.4 * t);
      d[5] = 1e-3 * std::sin(two_pi * 0.3 * t);
      break;
    }
    case DisturbanceMode::kNone:
    case DisturbanceMode::kStateDependent:
      break;
  }
  return d;
}

Scenario make_scenario(const std::string& name) {
  Scenario s;
  s.name = name;
  if (name == "fig8") {
    s.duration = 10.0;
    s.mode = DisturbanceMode::kStateDependent;
    s.sigma_on_reference = true;
    s.reference = reference_from_path([](double t) {
      constexpr double two_pi = 2.0 * std::numbers::pi;
      const double lift = smoothstep(0.0, 2.0, t) - smoothstep(8.0, 10.0, t);
      const double amp = smoothstep(1.5, 3.0, t) - smoothstep(7.0, 8.5, t);
      const double phase = two_pi * (t - 1.5) / 5.0;
      return Vector3(1.5 * amp * std::sin(phase), 0.75 * amp * std::sin(2.0 * phase), 1.5 * lift);
    });
  } else if (name == "hover") {
    s.duration = 5.0;
    s.mode = DisturbanceMode::kNone;
    s.reference = reference_from_path([](double t) { return Vector3(0.0, 0.0, 1.0 * smoothstep(0.0, 2.0, t)); });
  } else if (name == "payload" || name == "downwash" || name == "stepsine") {
    s.initial.p = Vector3(0.0, 0.0, 1.0);
    s.reference = [](double) {
      Reference r;
      r.p = Vector3(0.0, 0.0, 1.0);
      return r;
    };
    if (name == "payload") {
      s.duration = 6.0;
      s.mode = DisturbanceMode::kPayloadStep;
      s.event_start = 2.0;
      s.event_force = -0.3 * s.vehicle.gravity;
    } else if (name == "downwash") {
      s.duration = 8.0;
      s.mode = DisturbanceMode::kDownwashPulse;
      s.event_start = 3.0;
      s.event_end = 5.0;
      s.event_force = -7.0;
    } else {
      s.duration = 5.0;
      s.dt = 2.5e-3;
      s.mode = DisturbanceMode::kStepSinusoid;
      s.event_start = 1.0;
      s.event_force = -2.0;
    }
  } else {
    throw ConfigError("unknown scenario '" + name + "'");
  }
  return s;
}

std::uint64_t TraceLog::hash() const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& r : steps) {
    hash_double(h, r.t);
    hash_vector(h, r.x_true);
    hash_vector(h, r.x_hat);
    hash_vector(h, r.u);
    hash_double(h, r.loss);
    hash_double(h, r.kkt);
    const unsigned char flags = static_cast<unsigned char>((r.converged ? 1 : 0) | (r.skipped ? 2 : 0));
    hash_bytes(h, &flags, 1);
  }
  const unsigned char ab = aborted ? 1 : 0;
  hash_bytes(h, &ab, 1);
  return h;
}

void TraceLog::write_csv(std::ostream& os, const std::string& config_hash) const {
  os << "# config_hash=" << config_hash << "\n";
  if (aborted) os << "# aborted: " << diagnostic << "\n";
  os << "t";
  for (const char* g : {"true", "est"}) {
    for (const char* c : {"px", "py", "pz", "vx", "vy", "vz", "dfx", "dfy", "dfz", "dtx", "dty", "dtz"}) {
      os << ',' << c << '_' << g;
    }
  }
  os << ",px_ref,py_ref,pz_ref,f,taux,tauy,tauz,loss,kkt,converged,skipped\n";
  os << std::setprecision(17);
  constexpr std::array<int, 12> idx = {0, 1, 2, 3, 4, 5, 6, 7, 8, 21, 22, 23};
  for (const auto& r : steps) {
    os << r.t;
    for (int i : idx) os << ',' << r.x_true[i];
    for (int i : idx) os << ',' << r.x_hat[i];
    for (int i = 0; i < 3; ++i) os << ',' << r.ref.p[i];
    for (int i = 0; i < 4; ++i) os << ',' << r.u[i];
    os << ',' << r.loss << ',' << r.kkt << ',' << (r.converged ? 1 : 0) << ',' << (r.skipped ? 1 : 0) << "\n";
  }
}

void TraceLog::write_csv(const std::string& path, const std::string& config_hash) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_csv(os, config_hash);
}

TraceLog run_closed_loop(const Scenario& scenario, EstimatorHandle* estimator, const ControllerGains& gains,
                         std::uint64_t seed) {
  scenario.validate();
  gains.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& params = scenario.vehicle;
  const int steps = scenario.steps();
  const double dt = scenario.dt;

  Vector6 d = scenario.mode == DisturbanceMode::kStateDependent ? Vector6::Zero() : scenario.scripted_disturbance(0.0);
  Vector x = quad::augment(scenario.initial, d.head<3>(), d.tail<3>());
  const Vector zero_w = Vector::Zero(quad::kNoiseDim);

  TraceLog log;
  log.steps.reserve(static_cast<std::size_t>(steps));
  Vector u_prev;
  for (int k = 0; k < steps; ++k) {
    const double t = k * dt;
    Vector y = quad::measure(x);
    for (int i = 0; i < y.size(); ++i) y[i] += scenario.noise_std * normal(rng);

    StepRecord rec;
    rec.t = t;
    rec.x_true = x;
    if (estimator != nullptr) {
      EstimatorReport rep;
      try {
        rep = estimator->update(y, u_prev, k);
      } catch (const Error& e) {
        log.aborted = true;
        log.diagnostic = "estimator failed at step " + std::to_string(k) + ": " + e.what();
        break;
      }
      rec.x_hat = std::move(rep.x_hat);
      rec.loss = rep.loss;
      rec.kkt = rep.kkt;
      rec.converged = rep.converged;
      rec.skipped = rep.skipped;
    } else {
      rec.x_hat = quad::augment(state_from_measurement(y), Vector3::Zero(), Vector3::Zero());
    }
    if (rec.x_hat.size() != quad::kStateDim || !rec.x_hat.allFinite()) {
      log.aborted = true;
      log.diagnostic = "estimator returned an invalid state at step " + std::to_string(k);
      log.steps.push_back(std::move(rec));
      break;
    }
    rec.ref = scenario.reference(t);
    const quad::QuadState est = quad::QuadState::from_augmented(rec.x_hat);
    rec.u = baseline_controller(est, rec.ref, quad::disturbance_force(rec.x_hat), gains, params,
                                quad::disturbance_torque(rec.x_hat));
    u_prev = rec.u;
    log.steps.push_back(rec);

    Vector next = quad::integrate_rk4(x, rec.u, zero_w, dt, params);
    Eigen::Map<Matrix3> Rn(next.data() + quad::kRot);
    Rn = quad::orthonormalize(Matrix3(Rn));
    if (scenario.mode == DisturbanceMode::kStateDependent) {
      Vector x_sigma = x;
      if (scenario.sigma_on_reference) {
        quad::QuadState rs = quad::QuadState::from_stacked(rec.ref.stacked());
        x_sigma = quad::augment(rs, d.head<3>(), d.tail<3>());
      }
      d = sample_disturbance_step(d, x_sigma, scenario.disturbance, dt, rng);
    } else {
      d = scenario.scripted_disturbance(t + dt);
    }
    next.segment<3>(quad::kDistForce) = d.head<3>();
    next.segment<3>(quad::kDistTorque) = d.tail<3>();
    x = std::move(next);

    const double size = std::max(x.segment<3>(quad::kPos).norm(), x.segment<3>(quad::kVel).norm());
    if (!x.allFinite() || size > scenario.divergence_bound) {
      log.aborted = true;
      log.diagnostic = "plant diverged at t=" + std::to_string(t + dt);
      break;
    }
  }
  return log;
}

Vector FlightDataset::measurement(std::size_t i) const {
  const FlightSample& s = rows.at(i);
  quad::QuadState q;
  q.p = s.p;
  q.v = s.v;
  q.R = s.q.normalized().toRotationMatrix();
  q.omega = s.omega;
  return measurement_from_state(q);
}

Vector FlightDataset::control(std::size_t i) const { return rows.at(i).u; }

Vector6 FlightDataset::disturbance(std::size_t i, const quad::VehicleParams& params) const {
  const FlightSample& s = rows.at(i);
  return external_disturbance(s.a_v, s.a_omega, s.q.normalized().toRotationMatrix(), s.omega, s.u, params);
}

std::string FlightDataset::summary() const {
  std::ostringstream os;
  os << rows.size() << " rows";
  if (!rows.empty()) {
    os << ", t in [" << rows.front().t << ", " << rows.back().t << "], mean dt " << dt_mean
       << " s, max dt deviation " << dt_max_deviation << " s";
  }
  return os.str();
}

FlightDataset read_flight_dataset(std::istream& is, double expected_dt, double dt_tolerance) {
  FlightDataset data;
  std::string line;
  long row = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kDatasetHeader) throw ParseError("dataset header mismatch", row, 1);
      header_seen = true;
      continue;
    }
    double v[24];
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (int c = 0; c < 24; ++c) {
      const auto res = std::from_chars(p, end, v[c]);
      if (res.ec != std::errc() || !std::isfinite(v[c])) throw ParseError("invalid number", row, c + 1);
      p = res.ptr;
      if (c < 23) {
        if (p == end || *p != ',') throw ParseError("expected 24 columns", row, c + 1);
        ++p;
      }
    }
    if (p != end) throw ParseError("trailing data after 24 columns", row, 24);
    FlightSample s;
    s.t = v[0];
    s.p = Vector3(v[1], v[2], v[3]);
    s.v = Vector3(v[4], v[5], v[6]);
    s.q = Eigen::Quaterniond(v[7], v[8], v[9], v[10]);
    if (s.q.norm() < 1e-6) throw ParseError("zero quaternion", row, 8);
    s.omega = Vector3(v[11], v[12], v[13]);
    s.a_v = Vector3(v[14], v[15], v[16]);
    s.a_omega = Vector3(v[17], v[18], v[19]);
    s.u = Vector4(v[20], v[21], v[22], v[23]);
    if (!data.rows.empty()) {
      const double gap = s.t - data.rows.back().t;
      if (!(gap > 0.0)) throw ParseError("timestamps not strictly increasing", row, 1);
      if (std::abs(gap - expected_dt) > dt_tolerance) throw ParseError("time step outside tolerance", row, 1);
      data.dt_max_deviation = std::max(data.dt_max_deviation, std::abs(gap - expected_dt));
    }
    data.rows.push_back(s);
  }
  if (!header_seen) throw ParseError("empty dataset", row, 1);
  if (data.rows.empty()) throw ParseError("dataset has no rows", row, 1);
  if (data.rows.size() > 1) {
    data.dt_mean = (data.rows.back().t - data.rows.front().t) / static_cast<double>(data.rows.size() - 1);
  }
  return data;
}

FlightDataset load_flight_dataset(const std::string& path, double expected_dt, double dt_tolerance) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open dataset '" + path + "'");
  return read_flight_dataset(is, expected_dt, dt_tolerance);
}

void write_flight_dataset(std::ostream& os, const FlightDataset& data, const std::string& config_hash) {
  if (!config_hash.empty()) os << "# config_hash=" << config_hash << "\n";
  os << kDatasetHeader << "\n" << std::setprecision(17);
  for (const auto& s : data.rows) {
    os << s.t;
    for (int i = 0; i < 3; ++i) os << ',' << s.p[i];
    for (int i = 0; i < 3; ++i) os << ',' << s.v[i];
    os << ',' << s.q.w() << ',' << s.q.x() << ',' << s.q.y() << ',' << s.q.z();
    for (int i = 0; i < 3; ++i) os << ',' << s.omega[i];
    for (int i = 0; i < 3; ++i) os << ',' << s.a_v[i];
    for (int i = 0; i < 3; ++i) os << ',' << s.a_omega[i];
    for (int i = 0; i < 4; ++i) os << ',' << s.u[i];
    os << "\n";
  }
}

void write_flight_dataset(const std::string& path, const FlightDataset& data, const std::string& config_hash) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  write_flight_dataset(os, data, config_hash);
}

std::pair<FlightDataset, std::vector<Vector6>> generate_dataset(const Scenario& scenario, const ControllerGains& gains,
                                                                std::uint64_t seed) {
  scenario.validate();
  gains.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& params = scenario.vehicle;
  const double dt = scenario.dt;
  const Vector zero_w = Vector::Zero(quad::kNoiseDim);

  Vector6 d = scenario.mode == DisturbanceMode::kStateDependent ? Vector6::Zero() : scenario.scripted_disturbance(0.0);
  Vector x = quad::augment(scenario.initial, d.head<3>(), d.tail<3>());
  FlightDataset data;
  std::vector<Vector6> truth;
  const int steps = scenario.steps();
  for (int k = 0; k < steps; ++k) {
    const double t = k * dt;
    const quad::QuadState s = quad::QuadState::from_augmented(x);
    const Vector u = baseline_controller(s, scenario.reference(t), Vector3::Zero(), gains, params);
    const Vector rates = quad::continuous_dynamics(x, u, zero_w, params);

    FlightSample row;
    row.t = t;
    row.p = s.p;
    row.v = s.v;
    row.q = Eigen::Quaterniond(quad::orthonormalize(s.R));
    row.omega = s.omega;
    for (int i = 0; i < 3; ++i) {
      row.p[i] += scenario.noise_std * normal(rng);
      row.v[i] += scenario.noise_std * normal(rng);
      row.omega[i] += scenario.noise_std * normal(rng);
    }
    row.a_v = rates.segment<3>(quad::kVel);
    row.a_omega = rates.segment<3>(quad::kOmega);
    row.u = u;
    data.rows.push_back(row);
    truth.push_back(d);

    Vector next = quad::integrate_rk4(x, u, zero_w, dt, params);
    Eigen::Map<Matrix3> Rn(next.data() + quad::kRot);
    Rn = quad::orthonormalize(Matrix3(Rn));
    if (scenario.mode == DisturbanceMode::kStateDependent) {
      d = sample_disturbance_step(d, x, scenario.disturbance, dt, rng);
    } else {
      d = scenario.scripted_disturbance(t + dt);
    }
    next.segment<3>(quad::kDistForce) = d.head<3>();
    next.segment<3>(quad::kDistTorque) = d.tail<3>();
    x = std::move(next);
  }
  data.dt_mean = dt;
  return {std::move(data), std::move(truth)};
}

}  // namespace neuromhe::sim
