#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "neuromhe/gradkf.hpp"
#include "neuromhe/mhe.hpp"
#include "neuromhe/quadrotor.hpp"
#include "neuromhe/toy_models.hpp"

namespace neuromhe::validate {

struct Instance {
  HorizonWindow window;
  VectorSeq truth_x;
  VectorSeq truth_w;
};

Vector uniform_vector(std::mt19937_64& rng, int n, double scale = 1.0);

// Simulates the model itself from x0 and adds uniform measurement noise.
Instance simulate_instance(const Model& model, std::mt19937_64& rng, const Vector& x0, const VectorSeq& us, double dt,
                           double w_scale, double y_noise, int n_theta, double prior_offset = 0.0);
// Diagonals uniform in [0.5, 1.5] times the scale, forgetting factors in [0.6, 0.95].
WeightSpec random_weights(std::mt19937_64& rng, int nx, int ny, int nw, double r_scale = 10.0, double q_scale = 1.0,
                          double p_scale = 1.0);
Instance toy_instance(const ToyPendulumModel& model, std::mt19937_64& rng, int horizon, double y_noise = 0.02);
Instance quad_instance(const quad::QuadrotorModel& model, std::mt19937_64& rng, int horizon, double dt = 0.01,
                       double y_noise = 1e-3);
WeightSpec quad_weights(std::mt19937_64& rng);

struct SolvedInstance {
  MheCost cost;
  MheSolution solution;
  CoeffMatrices coeffs;
};

// Random instance (toy pendulum, n_x = 4, or quadrotor, n_x = 24) with a
// random prior sensitivity, solved and linearized.
SolvedInstance solve_random_instance(std::mt19937_64& rng, int horizon, bool quadrotor);

struct OracleReport {
  int instances = 0;
  int gradient_failures = 0;
  double max_rel_err = 0.0;
  std::vector<double> rel_errs;  // NaN for failed instances
};

// kf_gradient against dense_kkt_gradient on `instances` random instances.
// Instance i uses horizon i mod (max_horizon + 1) and alternates between the
// two models. corrupt perturbs one coefficient block seen only by the Kalman
// filter path (negative control). Instances run in parallel with `jobs`
// threads; each draws from its own generator so results do not depend on jobs.
OracleReport kf_vs_dense(int instances, std::uint64_t seed, int max_horizon = 10, int jobs = 1, bool corrupt = false);

// Per-column relative error between the Kalman-filter sensitivities and
// central differences of the re-solved toy problem.
std::vector<double> finite_difference_columns(int horizon, std::uint64_t seed, double step = 1e-4, int jobs = 1);

struct InductionReport {
  double single_point_err = 0.0;  // one measurement against the closed form
  double two_point_err = 0.0;     // two measurements against X_kf + C Fbar^T Lambda
};

InductionReport induction_checks(std::uint64_t seed);

// Scalar random walk x+ = x + w, y = x, with the constraint w_k <= c active
// at the optimum.
struct BarrierToy {
  LinearModel model{Matrix::Identity(1, 1), Matrix::Zero(1, 1), Matrix::Identity(1, 1), Matrix::Identity(1, 1)};
  HorizonWindow window;
  WeightSpec weights;
  double c = 0.25;

  BarrierToy();
  SoftConstraintSet constraints(double delta) const;
  // Exact minimizer z = [x0, w0, w1, w2] by enumerating active sets.
  Vector active_set_solution() const;
  // Barrier solution in the same z layout.
  Vector barrier_solution(double delta, MheSolution* solution = nullptr) const;
};

// Distance from the barrier solution to the active-set solution per delta.
std::vector<double> barrier_distances(const std::vector<double>& deltas);

struct TimingRow {
  int horizon = 0;
  double kf_ms = 0.0;
  double dense_ms = 0.0;
};

// Median wall time of kf_gradient (kf_reps runs after a warm-up) and
// dense_kkt_gradient (dense_reps runs, skipped when 0) on a quadrotor window
// per horizon, redrawn until regular. Repetitions cycle through the horizons so slow phases of the
// machine affect all of them alike. Measurement runs serially.
std::vector<TimingRow> time_gradients(const std::vector<int>& horizons, int kf_reps, int dense_reps,
                                      std::uint64_t seed);

}  // namespace neuromhe::validate
