#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "neuromhe/quadrotor.hpp"

namespace neuromhe::sim {

// sigma_f = c_v v^2 + c_p p^2 + c_f and sigma_tau = c_omega omega^2 + c_theta Theta_e^2 + c_tau,
// elementwise, with ZYX Euler angles Theta_e. Each coefficient is the
// diagonal of a 3x3 matrix.
struct DisturbanceModel {
  Vector3 c_v{1.0, 1.0, 3.0};
  Vector3 c_p{0.5, 0.5, 1.5};
  Vector3 c_f{0.5, 0.5, 1.5};
  Vector3 c_omega{1e-2, 1e-2, 1e-2};
  Vector3 c_theta{1e-2, 1e-2, 1e-2};
  Vector3 c_tau{1e-2, 1e-2, 1e-2};

  void validate() const;
  // Standard deviations [sigma_f; sigma_tau] at the augmented state x.
  Vector6 sigma(const Vector& x) const;
};

// d_next = d_prev + dt * w with w ~ N(0, diag(sigma(x_true))^2).
Vector6 sample_disturbance_step(const Vector6& d_prev, const Vector& x_true, const DisturbanceModel& model, double dt,
                                std::mt19937_64& rng);

struct Reference {
  Vector3 p = Vector3::Zero();
  Vector3 v = Vector3::Zero();
  Vector3 a = Vector3::Zero();
  double yaw = 0.0;
  // Flat-output attitude, body rate and body angular acceleration that realize `a`.
  Matrix3 R = Matrix3::Identity();
  Vector3 omega = Vector3::Zero();
  Vector3 alpha = Vector3::Zero();

  // Stacked [p; v; vec(R); omega].
  Vector stacked() const;
};

// Attitude whose thrust axis is parallel to a + g z, with heading yaw.
Matrix3 attitude_from_acceleration(const Vector3& a, double yaw, double gravity);

using ReferenceFn = std::function<Reference(double t)>;

// Reference with velocity, acceleration, attitude, body rate and angular
// acceleration obtained by central differences of a position path (zero yaw).
ReferenceFn reference_from_path(std::function<Vector3(double)> path, double gravity = 9.81);

struct ControllerGains {
  Vector3 kp{8.0, 8.0, 10.0};
  Vector3 kv{4.0, 4.0, 5.0};
  Vector3 kr{1.0, 1.0, 0.6};
  Vector3 kw{0.08, 0.08, 0.06};
  double max_thrust = 30.0;

  void validate() const;
};

// Geometric tracking controller on SE(3) with the reference body rate and
// angular acceleration as feedforward. The estimated world-frame force
// disturbance enters the desired force as feedforward (subtracted), the
// torque estimate likewise. The attitude of `est` is re-orthonormalized.
Vector baseline_controller(const quad::QuadState& est, const Reference& ref, const Vector3& d_force_hat,
                           const ControllerGains& gains, const quad::VehicleParams& params,
                           const Vector3& d_torque_hat = Vector3::Zero());

// Body-frame force (including thrust) and torque (including control torque)
// from measured accelerations.
std::pair<Vector3, Vector3> ground_truth_disturbance(const Vector3& a_v, const Vector3& a_omega, const Matrix3& R,
                                                     const Vector3& omega, const quad::VehicleParams& params);
// The same quantities expressed in the estimator's convention: world-frame
// external force and body-frame external torque (thrust and control torque removed).
Vector6 external_disturbance(const Vector3& a_v, const Vector3& a_omega, const Matrix3& R, const Vector3& omega,
                             const Vector& u, const quad::VehicleParams& params);

enum class DisturbanceMode { kNone, kStateDependent, kPayloadStep, kDownwashPulse, kStepSinusoid };

struct Scenario {
  std::string name;
  double duration = 10.0;
  double dt = 0.01;
  ReferenceFn reference;
  quad::QuadState initial;
  DisturbanceMode mode = DisturbanceMode::kNone;
  DisturbanceModel disturbance;
  // Evaluate sigma on the reference instead of the true state (offline disturbance generation).
  bool sigma_on_reference = false;
  double event_start = 2.0;     // payload step time or pulse start
  double event_end = 4.0;       // pulse end
  double event_force = -2.94;   // world z force of the payload or pulse
  double noise_std = 1e-3;      // measurement noise per channel
  double divergence_bound = 100.0;
  quad::VehicleParams vehicle;

  int steps() const { return static_cast<int>(std::lround(duration / dt)); }
  void validate() const;
  // Disturbance for the scripted modes; not used for kStateDependent.
  Vector6 scripted_disturbance(double t) const;
};

// Known names: fig8, hover, payload, downwash, stepsine. Throws ConfigError("unknown scenario ...").
Scenario make_scenario(const std::string& name);

struct EstimatorReport {
  Vector x_hat;  // augmented estimate at the newest time
  double loss = std::numeric_limits<double>::quiet_NaN();
  double kkt = std::numeric_limits<double>::quiet_NaN();
  bool converged = true;
  bool skipped = false;
};

// Called once per control step with the newest measurement and the previous
// control (empty on the first call).
class EstimatorHandle {
 public:
  virtual ~EstimatorHandle() = default;
  virtual EstimatorReport update(const Vector& y, const Vector& u_prev, int step) = 0;
};

struct StepRecord {
  double t = 0.0;
  Vector x_true;  // augmented true state (true disturbance in the d slots)
  Vector x_hat;
  Reference ref;
  Vector u;
  double loss = 0.0;
  double kkt = 0.0;
  bool converged = true;
  bool skipped = false;
};

struct TraceLog {
  std::vector<StepRecord> steps;
  bool aborted = false;
  std::string diagnostic;

  std::uint64_t hash() const;
  void write_csv(std::ostream& os, const std::string& config_hash) const;
  void write_csv(const std::string& path, const std::string& config_hash) const;
};

// Plant: RK4 at scenario.dt with polar re-orthonormalization after every step.
// A null estimator feeds the noisy measurement and zero disturbance estimate
// to the controller (nominal controller without compensation).
TraceLog run_closed_loop(const Scenario& scenario, EstimatorHandle* estimator, const ControllerGains& gains,
                         std::uint64_t seed);

// One row of the flight-data CSV.
struct FlightSample {
  double t = 0.0;
  Vector3 p, v;
  Eigen::Quaterniond q;
  Vector3 omega, a_v, a_omega;
  Vector4 u;  // f, tau_x, tau_y, tau_z
};

struct FlightDataset {
  std::vector<FlightSample> rows;
  double dt_mean = 0.0;
  double dt_max_deviation = 0.0;

  Vector measurement(std::size_t i) const;
  Vector control(std::size_t i) const;
  // Ground truth in the estimator's convention (see external_disturbance).
  Vector6 disturbance(std::size_t i, const quad::VehicleParams& params) const;
  std::string summary() const;
};

inline constexpr const char* kDatasetHeader =
    "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,avx,avy,avz,awx,awy,awz,f,taux,tauy,tauz";

// Lines starting with '#' are ignored. The header must match exactly,
// timestamps must increase, and each spacing must be within dt_tolerance of expected_dt.
FlightDataset load_flight_dataset(const std::string& path, double expected_dt = 2.5e-3, double dt_tolerance = 2.5e-4);
FlightDataset read_flight_dataset(std::istream& is, double expected_dt = 2.5e-3, double dt_tolerance = 2.5e-4);
void write_flight_dataset(std::ostream& os, const FlightDataset& data, const std::string& config_hash = "");
void write_flight_dataset(const std::string& path, const FlightDataset& data, const std::string& config_hash = "");

// Flies the scenario with the nominal controller fed by the true state and
// records the flight in dataset form (accelerations from the true dynamics).
// Returns the dataset and the true external disturbance per row.
std::pair<FlightDataset, std::vector<Vector6>> generate_dataset(const Scenario& scenario, const ControllerGains& gains,
                                                                std::uint64_t seed);

}  // namespace neuromhe::sim
