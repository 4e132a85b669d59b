#include "neuromhe/weights.hpp"

#include <cmath>
#include <string>

namespace neuromhe {

Vector WeightSpec::theta() const {
  const WeightLayout l = layout();
  Vector t(l.size());
  t.head(l.nx) = P;
  t[l.gamma1()] = gamma1;
  t.segment(l.r(1), l.ny - 1) = R.tail(l.ny - 1);
  t[l.gamma2()] = gamma2;
  t.tail(l.nw) = Q;
  return t;
}

WeightSpec WeightSpec::from_theta(const Vector& theta, const WeightLayout& l, double r_fixed) {
  if (theta.size() != l.size()) throw ConfigError("theta has wrong length");
  WeightSpec w;
  w.P = theta.head(l.nx);
  w.gamma1 = theta[l.gamma1()];
  w.R.resize(l.ny);
  w.R[0] = r_fixed;
  w.R.tail(l.ny - 1) = theta.segment(l.r(1), l.ny - 1);
  w.gamma2 = theta[l.gamma2()];
  w.Q = theta.tail(l.nw);
  return w;
}

void WeightSpec::validate(double floor) const {
  auto check = [floor](const Vector& d, const char* name) {
    if (d.size() == 0) throw ConfigError(std::string(name) + " is empty");
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i]) || d[i] < floor) {
        throw ConfigError(std::string(name) + "[" + std::to_string(i) + "] below positivity floor");
      }
    }
  };
  check(P, "P");
  check(R, "R");
  check(Q, "Q");
  if (!(gamma1 > 0.0 && gamma1 < 1.0)) throw ConfigError("gamma1 must lie in (0, 1)");
  if (!(gamma2 > 0.0 && gamma2 < 1.0)) throw ConfigError("gamma2 must lie in (0, 1)");
}

double WeightSpec::R_scale(int k, int horizon) const { return std::pow(gamma1, horizon - k); }
double WeightSpec::Q_scale(int k, int horizon) const { return std::pow(gamma2, horizon - 1 - k); }

Vector WeightSpec::R_at(int k, int horizon) const { return R_scale(k, horizon) * R; }
Vector WeightSpec::Q_at(int k, int horizon) const { return Q_scale(k, horizon) * Q; }

Vector WeightSpec::dR_dgamma1(int k, int horizon) const {
  const int e = horizon - k;
  if (e == 0) return Vector::Zero(R.size());
  return (e * std::pow(gamma1, e - 1)) * R;
}

Vector WeightSpec::dQ_dgamma2(int k, int horizon) const {
  const int e = horizon - 1 - k;
  if (e == 0) return Vector::Zero(Q.size());
  return (e * std::pow(gamma2, e - 1)) * Q;
}

}  // namespace neuromhe
