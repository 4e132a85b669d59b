#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "neuromhe/gradkf.hpp"
#include "neuromhe/mhe.hpp"
#include "neuromhe/neuro.hpp"
#include "neuromhe/sim.hpp"

namespace neuromhe::train {

struct LossSpec {
  enum class Kind { kTracking, kEstimation };
  Kind kind = Kind::kTracking;
  double alpha = 1.0;
  Vector We;  // 18 entries for tracking, 6 for estimation

  // Position-dominated tracking weights over [p; v; vec(R); omega].
  static LossSpec tracking_default();
  static LossSpec estimation_default();
  void validate() const;
};

struct LossResult {
  double value = 0.0;
  VectorSeq grad;  // dL/dx_k, augmented layout, one per window stage
};

// alpha * sum_k |x^q_k - ref_k|^2_We over the window. reference[k] is the
// stacked [p; v; vec(R); omega] aligned with solution.xs[k].
LossResult tracking_loss(const MheSolution& solution, const VectorSeq& reference, const LossSpec& spec);
// alpha * sum_k |d_k - truth_k|^2_We on the disturbance slots.
LossResult estimation_loss(const MheSolution& solution, const std::vector<Vector6>& truth, const LossSpec& spec);

// dL/dtheta = sum_k X_k^T dL/dx_k.
Vector theta_gradient(const VectorSeq& dl_dx, const GradientTrajectory& traj);

// Flattened MLP gradient: dL/dtheta scaled by the diagonal dtheta/dTheta and
// back-propagated through the network at the cached forward pass.
Vector assemble_gradient(const VectorSeq& dl_dx, const GradientTrajectory& traj, const Vector& weights_jac,
                         const MlpParams& params, const MlpCache& cache);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

struct AdamState {
  AdamHyper hyper;
  Vector m;
  Vector v;
  long step = 0;

  AdamState() = default;
  AdamState(int n, AdamHyper h) : hyper(h), m(Vector::Zero(n)), v(Vector::Zero(n)) {}
};

void adam_update(AdamState& state, Vector& params, const Vector& gradient);

// Source of the MHE weights at every step. Neural: theta = map(MLP(y)).
// Fixed (DMHE): theta = map(raw) with a trainable raw vector.
class WeightPolicy {
 public:
  struct Evaluation {
    Vector raw;
    MlpCache cache;
  };

  static WeightPolicy neural(MlpParams params, WeightLayout layout, std::optional<Standardizer> standardizer = {},
                             double floor = 1e-4, double r_fixed = 100.0, double r_floor = -1.0);
  static WeightPolicy fixed(Vector raw, WeightLayout layout, double floor = 1e-4, double r_fixed = 100.0,
                            double r_floor = -1.0);

  bool is_neural() const { return neural_; }
  const WeightLayout& layout() const { return layout_; }
  double floor() const { return floor_; }
  double r_fixed() const { return r_fixed_; }
  double r_floor() const { return r_floor_ < 0.0 ? floor_ : r_floor_; }
  const MlpParams& mlp() const { return mlp_; }
  const std::optional<Standardizer>& standardizer() const { return standardizer_; }
  const Vector& raw_fixed() const { return raw_; }

  WeightSpec weights(const Vector& y, Evaluation* eval = nullptr) const;
  // Trainable parameters, flattened.
  Vector parameters() const;
  void set_parameters(const Vector& p);
  // Gradient over parameters() given dL/dtheta at the evaluation.
  Vector backprop(const Vector& dl_dtheta, const Evaluation& eval) const;

 private:
  bool neural_ = false;
  WeightLayout layout_;
  double floor_ = 1e-4;
  double r_fixed_ = 100.0;
  double r_floor_ = -1.0;
  MlpParams mlp_;
  std::optional<Standardizer> standardizer_;
  Vector raw_;
};

// Fixed policies are stored as a network with zero hidden weights whose
// output bias is the raw vector.
Checkpoint to_checkpoint(const WeightPolicy& policy, std::uint64_t seed);
// Throws ConfigError when the checkpoint's output size does not match the layout.
WeightPolicy policy_from_checkpoint(const Checkpoint& checkpoint, const WeightLayout& layout);

// Window losses for the estimator: given the solution and the absolute index
// of the newest stage, returns the loss and its state gradient.
using WindowLoss = std::function<LossResult(const MheSolution& solution, int newest_step)>;

struct EstimatorConfig {
  int horizon = 10;
  double dt = 0.01;
  MheOptions solver;
  bool learn = false;
  // Collect gradients and apply them in flush() instead of after each step.
  bool accumulate = false;
  AdamHyper adam;
  // Disturbance part of the first prior; the rest comes from the first measurement.
  Vector6 initial_disturbance = Vector6::Zero();
  void validate() const;
};

struct EstimatorStats {
  long steps = 0;
  long updates = 0;
  long skipped_nonconverged = 0;
  long skipped_gradient = 0;
  double loss_sum = 0.0;
  long loss_count = 0;
  double max_kkt = 0.0;

  long skipped() const { return skipped_nonconverged + skipped_gradient; }
  double mean_loss() const { return loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0; }
};

// Moving horizon estimator for the quadrotor, optionally learning its
// weighting policy online from a window loss.
class MheEstimator : public sim::EstimatorHandle {
 public:
  MheEstimator(const quad::QuadrotorModel& model, WeightPolicy& policy, EstimatorConfig config,
               WindowLoss loss = {}, AdamState* adam = nullptr);

  sim::EstimatorReport update(const Vector& y, const Vector& u_prev, int step) override;
  // Applies the accumulated gradient (accumulate mode); no-op otherwise.
  void flush();

  const EstimatorStats& stats() const { return stats_; }
  const std::optional<MheSolution>& last_solution() const { return last_; }
  const WeightSpec& last_weights() const { return last_weights_; }

 private:
  const quad::QuadrotorModel* model_;
  WeightPolicy* policy_;
  EstimatorConfig config_;
  WindowLoss loss_;
  AdamState* adam_;
  std::optional<HorizonWindow> window_;
  std::optional<MheSolution> last_;
  std::optional<Matrix> next_prior_grad_;
  WeightSpec last_weights_;
  Vector accumulated_;
  long accumulated_count_ = 0;
  EstimatorStats stats_;
};

struct RlHyper {
  EstimatorConfig estimator;
  LossSpec loss = LossSpec::tracking_default();
  sim::ControllerGains gains;
};

struct EpisodeResult {
  sim::TraceLog trace;
  double mean_loss = 0.0;
  EstimatorStats stats;
};

// One closed-loop episode. With hyper.estimator.learn the policy is updated
// in place after every step (or once at the end in accumulate mode).
EpisodeResult run_episode_rl(const sim::Scenario& scenario, WeightPolicy& policy, AdamState& adam,
                             const RlHyper& hyper, std::uint64_t seed);

struct MetricsRow {
  int episode = 0;
  long step = 0;  // cumulative control steps
  double loss = 0.0;       // loss at the last step of the episode
  double mean_loss = 0.0;
  double kkt = 0.0;        // largest KKT residual seen in the episode
  long skipped = 0;
};

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, const std::string& config_hash);

struct RlTrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<double> mean_losses;
  bool converged = false;
  bool aborted = false;
  std::string diagnostic;
};

// Episodes until the relative change of the mean loss stays below
// `tolerance` for `patience` consecutive episodes or max_episodes is reached.
// Episode e (0-based) uses seed + e * seed_stride, so the default replays the
// disturbance and noise realization of `seed` every time.
RlTrainResult train_rl(const sim::Scenario& scenario, WeightPolicy& policy, const RlHyper& hyper, int max_episodes,
                       std::uint64_t seed, double tolerance = 1e-3, int patience = 3,
                       const std::function<void(const MetricsRow&)>& on_episode = {},
                       std::uint64_t seed_stride = 0);

struct SupervisedHyper {
  EstimatorConfig estimator;
  LossSpec loss = LossSpec::estimation_default();
  int epochs = 5;
};

struct SupervisedResult {
  std::vector<double> epoch_loss;
  EstimatorStats last_stats;
};

// Runs the estimator over the dataset once per epoch, learning from the
// estimation error against the dataset's ground-truth disturbance.
// on_epoch is called after each epoch (e.g. to save a checkpoint).
SupervisedResult train_supervised(const sim::FlightDataset& data, WeightPolicy& policy, const SupervisedHyper& hyper,
                                  const quad::VehicleParams& params = {},
                                  const std::function<void(int epoch, const WeightPolicy&)>& on_epoch = {});

struct DatasetRun {
  VectorSeq estimates;             // augmented estimate per row
  std::vector<Vector6> truth;      // ground-truth disturbance per row
  EstimatorStats stats;
};

// Estimator pass over a dataset without learning.
DatasetRun replay_dataset(const sim::FlightDataset& data, const WeightPolicy& policy, const EstimatorConfig& config,
                          const quad::VehicleParams& params = {});

}  // namespace neuromhe::train
