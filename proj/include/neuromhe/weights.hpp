#pragma once

#include "neuromhe/types.hpp"

namespace neuromhe {

// Column layout of the tunable vector theta:
//   [P_1..P_nx, gamma1, R_2..R_ny, gamma2, Q_1..Q_nw]
// R_1 is fixed and excluded. For the quadrotor this is 24 + 1 + 17 + 1 + 6 = 49.
struct WeightLayout {
  int nx = 0;
  int ny = 0;
  int nw = 0;

  int size() const { return nx + ny + nw + 1; }
  int p(int i) const { return i; }
  int gamma1() const { return nx; }
  // j is the 0-based measurement channel, j >= 1.
  int r(int j) const { return nx + j; }
  int gamma2() const { return nx + ny; }
  int q(int i) const { return nx + ny + 1 + i; }
};

struct WeightSpec {
  Vector P;  // arrival-cost diagonal
  double gamma1 = 0.5;
  Vector R;  // newest measurement weight diagonal, R[0] fixed
  double gamma2 = 0.5;
  Vector Q;  // newest process-noise weight diagonal

  WeightLayout layout() const { return {static_cast<int>(P.size()), static_cast<int>(R.size()), static_cast<int>(Q.size())}; }

  Vector theta() const;
  static WeightSpec from_theta(const Vector& theta, const WeightLayout& layout, double r_fixed = 100.0);

  // Throws ConfigError unless every diagonal >= floor and gammas are in (0, 1).
  void validate(double floor = 1e-4) const;

  // R_k = gamma1^(n-k) R and Q_k = gamma2^(n-1-k) Q for a window of horizon n.
  Vector R_at(int k, int horizon) const;
  Vector Q_at(int k, int horizon) const;
  // Derivatives of R_k / Q_k with respect to the forgetting factors.
  Vector dR_dgamma1(int k, int horizon) const;
  Vector dQ_dgamma2(int k, int horizon) const;
  double R_scale(int k, int horizon) const;
  double Q_scale(int k, int horizon) const;
};

}  // namespace neuromhe
