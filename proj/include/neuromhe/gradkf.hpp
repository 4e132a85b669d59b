#pragma once

#include <vector>

#include "neuromhe/mhe.hpp"

namespace neuromhe {

// Second derivatives of the MHE Lagrangian at one stage of the window.
// At the terminal stage only lxx and lxtheta are set. At stage 0, lxx
// excludes the arrival weight P.
struct StageCoeffs {
  Matrix lxx;
  Matrix lxw;
  Matrix lww;
  Matrix lxtheta;
  Matrix lwtheta;
  Matrix F;
  Matrix G;

  Matrix lwx() const { return lxw.transpose(); }
};

struct CoeffMatrices {
  std::vector<StageCoeffs> stages;  // horizon+1 entries
  Matrix H;

  int horizon() const { return static_cast<int>(stages.size()) - 1; }
  int state_dim() const { return static_cast<int>(stages.front().lxx.rows()); }
  int noise_dim() const { return horizon() > 0 ? static_cast<int>(stages.front().lww.rows()) : 0; }
  int theta_dim() const { return static_cast<int>(stages.front().lxtheta.cols()); }
};

// Requires converged primal variables and duals from solve_mhe.
// Throws GradientFailure when some L_ww is numerically singular.
CoeffMatrices coeff_matrices(const MheCost& cost, const MheSolution& solution);

// Sensitivities of the optimal estimates with respect to theta.
struct GradientTrajectory {
  MatrixSeq Xs;       // horizon+1 matrices, nx x n_theta
  MatrixSeq Ws;       // horizon matrices, nw x n_theta
  MatrixSeq Lambdas;  // horizon+1 matrices; the last one is identically zero
};

struct KfRecursionState {
  Matrix X_kf;   // filtered estimate
  Matrix C;
  Matrix P_cov;  // predicted covariance (inverse arrival weight at stage 0)
  Matrix S;
  Matrix T;
  Matrix Fbar;   // empty at the terminal stage
};

struct KfGradientResult {
  GradientTrajectory trajectory;
  std::vector<KfRecursionState> stages;
};

// Forward Kalman filter, backward multiplier pass and forward correction.
// Throws GradientFailure when I - P_k S_k is numerically singular.
KfGradientResult kf_gradient_detailed(const CoeffMatrices& coeffs, const Matrix& prior_grad, const Vector& P_diag);
GradientTrajectory kf_gradient(const CoeffMatrices& coeffs, const Matrix& prior_grad, const Vector& P_diag);

// Solves the differentiated KKT system as one dense linear system. Unknown
// ordering: X_0..X_N, then W_0..W_{N-1}, then Lambda_0..Lambda_{N-1}.
GradientTrajectory dense_kkt_gradient(const CoeffMatrices& coeffs, const Matrix& prior_grad, const Vector& P_diag);

// Trace-form quadratic cost of the auxiliary estimation problem whose
// minimizer (subject to X_{k+1} = F_k X_k + G_k W_k) is the sensitivity trajectory.
double auxiliary_cost_value(const GradientTrajectory& traj, const CoeffMatrices& coeffs, const Matrix& prior_grad,
                            const Vector& P_diag);

// Relative Frobenius distance between two trajectories, with every sequence
// stacked: max over {Xs, Ws, Lambdas} of |a - b| / max(|b|, floor).
double trajectory_rel_err(const GradientTrajectory& a, const GradientTrajectory& b, double floor = 1e-300);

}  // namespace neuromhe
