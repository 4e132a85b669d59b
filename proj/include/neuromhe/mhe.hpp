#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "neuromhe/model.hpp"
#include "neuromhe/weights.hpp"

namespace neuromhe {

// Sliding data window. Index 0 is time t-N, index horizon() is time t.
struct HorizonWindow {
  VectorSeq ys;       // horizon()+1 measurements
  VectorSeq us;       // horizon() control inputs
  double dt = 0.0;
  Vector prior_x;     // filter prior for x_{t-N}
  Matrix prior_grad;  // d prior_x / d theta (nx x n_theta)
  int max_horizon = 10;

  int horizon() const { return static_cast<int>(us.size()); }
  void validate(const Model& model, int n_theta) const;
};

// g(x_k, w_k) < 0. At the terminal stage w is an empty vector.
struct SoftConstraint {
  std::function<double(const Vector& x, const Vector& w)> value;
  std::function<void(const Vector& x, const Vector& w, Vector& gx, Vector& gw)> gradient;
  // Optional second derivatives; treated as zero when unset.
  std::function<void(const Vector& x, const Vector& w, Matrix& hxx, Matrix& hxw, Matrix& hww)> hessian;
  int stage = -1;  // -1 applies the constraint at every stage
};

struct SoftConstraintSet {
  std::vector<SoftConstraint> constraints;
  double delta = 1e-4;
};

// Gradient and Hessian of the barrier term -delta * sum ln(-g) at one stage.
struct BarrierStage {
  Vector gx;
  Vector gw;
  Matrix hxx;
  Matrix hxw;
  Matrix hww;
};

// MHE cost functional: arrival cost, forgetting-factor-weighted measurement
// and process-noise terms, and optional log-barrier terms. Keeps a reference
// to the model, which must outlive the cost.
class MheCost {
 public:
  MheCost(const Model& model, HorizonWindow window, WeightSpec weights, double weight_floor = 1e-4);

  const Model& model() const { return *model_; }
  const HorizonWindow& window() const { return window_; }
  const WeightSpec& weights() const { return weights_; }
  const std::optional<SoftConstraintSet>& barrier() const { return barrier_; }
  int horizon() const { return window_.horizon(); }

  void set_barrier(SoftConstraintSet set);

  VectorSeq rollout(const Vector& x0, const VectorSeq& ws) const;
  // +infinity outside the barrier interior.
  double value(const VectorSeq& xs, const VectorSeq& ws) const;
  bool interior(const VectorSeq& xs, const VectorSeq& ws) const;
  // w is empty at the terminal stage.
  BarrierStage barrier_stage(int k, const Vector& x, const Vector& w) const;

 private:
  const Model* model_;
  HorizonWindow window_;
  WeightSpec weights_;
  std::optional<SoftConstraintSet> barrier_;
};

MheCost build_cost(const Model& model, const HorizonWindow& window, const WeightSpec& weights,
                   double weight_floor = 1e-4);
MheCost barrier_augment(MheCost cost, SoftConstraintSet constraints);

struct MheOptions {
  double tol = 1e-8;
  int max_iterations = 50;
  double lm_initial = 1e-6;
  double lm_min = 1e-12;
  double lm_max = 1e12;
  double lm_factor = 10.0;
  double armijo = 1e-4;
  int max_backtracks = 40;
  // Adds the lambda-contracted dynamics curvature to the Gauss-Newton matrix.
  bool exact_hessian = false;
  // Called with the initial iterate and every accepted iterate.
  std::function<void(const VectorSeq& xs, const VectorSeq& ws)> on_accept;
};

struct MheSolution {
  VectorSeq xs;     // horizon+1 state estimates
  VectorSeq ws;     // horizon process-noise estimates
  VectorSeq duals;  // horizon+1 multipliers; duals.back() is identically zero
  double cost = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct MheInitialGuess {
  Vector x0;
  VectorSeq ws;
};

MheSolution solve_mhe(const MheCost& cost, const MheOptions& options = {},
                      const std::optional<MheInitialGuess>& guess = std::nullopt);

// Warm start for the next window: drop the oldest stage and append zero noise
// (or keep everything while the window is still growing).
MheInitialGuess shift_guess(const MheSolution& previous, bool window_slides, int noise_dim);

// Backward recursion lambda_{k-1} = H^T R_k (y_k - h(x_k)) - dB/dx_k + F_k^T lambda_k, lambda_t = 0.
VectorSeq recover_duals(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws);

struct KktResiduals {
  double boundary = 0.0;  // stationarity in x_{t-N}
  double states = 0.0;    // stationarity in x_k, k > t-N
  double noise = 0.0;     // stationarity in w_k
  double dynamics = 0.0;  // x_{k+1} - f(x_k, u_k, w_k)
  double max() const;
};

KktResiduals kkt_residuals(const MheCost& cost, const VectorSeq& xs, const VectorSeq& ws, const VectorSeq& duals);

// Grows the window until max_horizon, then slides it, taking the new prior from
// the second state of the current solution and its sensitivity (zeros if null).
HorizonWindow advance_window(const HorizonWindow& window, const MheSolution& solution, const Vector& y,
                             const Vector& u, const Matrix* next_prior_grad = nullptr);

}  // namespace neuromhe
