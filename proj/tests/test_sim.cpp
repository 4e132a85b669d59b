#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "neuromhe/sim.hpp"
#include "test_util.hpp"

using namespace neuromhe;
using namespace neuromhe::sim;
using namespace neuromhe::testing;

namespace {

constexpr double kGoldenRmse = 0.00380;

double position_rmse(const TraceLog& log, int axis_begin, int axis_count) {
  double acc = 0.0;
  for (const auto& r : log.steps) {
    acc += (r.x_true.segment(axis_begin, axis_count) - r.ref.p.segment(axis_begin, axis_count)).squaredNorm();
  }
  return std::sqrt(acc / static_cast<double>(log.steps.size()));
}

// Feeds the controller the exact state and the exact scripted disturbance.
class OracleEstimator : public EstimatorHandle {
 public:
  explicit OracleEstimator(const Scenario& s) : s_(s) {}
  EstimatorReport update(const Vector& y, const Vector&, int step) override {
    quad::QuadState q;
    q.p = y.segment<3>(0);
    q.v = y.segment<3>(3);
    q.R = Eigen::Map<const Matrix3>(y.data() + 6);
    q.omega = y.segment<3>(15);
    const Vector6 d = s_.scripted_disturbance(step * s_.dt);
    EstimatorReport rep;
    rep.x_hat = quad::augment(q, d.head<3>(), d.tail<3>());
    return rep;
  }

 private:
  Scenario s_;
};

double mean_height_error(const TraceLog& log, double t_from) {
  double acc = 0.0;
  int n = 0;
  for (const auto& r : log.steps) {
    if (r.t < t_from) continue;
    acc += std::abs(r.x_true[2] - r.ref.p[2]);
    ++n;
  }
  return acc / n;
}

}  // namespace

TEST(Disturbance, ZeroCoefficientsKeepDisturbanceConstant) {
  DisturbanceModel m;
  m.c_v = m.c_p = m.c_f = m.c_omega = m.c_theta = m.c_tau = Vector3::Zero();
  std::mt19937_64 rng(3);
  Vector6 d;
  d << 1, 2, 3, 4, 5, 6;
  const Vector x = random_aug_state(rng);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_disturbance_step(d, x, m, 0.01, rng), d);
}

TEST(Disturbance, MonteCarloMatchesSigmaFormula) {
  DisturbanceModel m;
  std::mt19937_64 rng(11);
  const Vector x = random_aug_state(rng);
  const Vector6 sigma = m.sigma(x);
  constexpr int kDraws = 100000;
  constexpr double dt = 0.01;
  Vector6 sum = Vector6::Zero(), sq = Vector6::Zero();
  for (int i = 0; i < kDraws; ++i) {
    const Vector6 w = sample_disturbance_step(Vector6::Zero(), x, m, dt, rng) / dt;
    sum += w;
    sq += w.cwiseAbs2();
  }
  const Vector6 mean = sum / kDraws;
  const Vector6 var = sq / kDraws - mean.cwiseAbs2();
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(std::sqrt(var[i]) / sigma[i], 1.0, 0.02) << i;
}

TEST(Disturbance, VerticalCoefficientsGiveNineTimesVariance) {
  DisturbanceModel m;
  quad::QuadState s;
  s.p = Vector3(1.0, 1.0, 1.0);
  s.v = Vector3(-0.8, 0.8, 0.8);
  s.p.z() = 1.0;
  const Vector x = quad::augment(s, Vector3::Zero(), Vector3::Zero());
  // |v| and |p| equal across axes, so the z-to-x ratio is set by the coefficients alone.
  std::mt19937_64 rng(5);
  constexpr int kDraws = 100000;
  double sx = 0.0, sz = 0.0;
  for (int i = 0; i < kDraws; ++i) {
    const Vector6 w = sample_disturbance_step(Vector6::Zero(), x, m, 1.0, rng);
    sx += w[0] * w[0];
    sz += w[2] * w[2];
  }
  EXPECT_NEAR((sz / kDraws) / (sx / kDraws) / 9.0, 1.0, 0.1);
}

TEST(Disturbance, SameSeedSameSequence) {
  DisturbanceModel m;
  std::mt19937_64 a(9), b(9);
  std::mt19937_64 rng(1);
  const Vector x = random_aug_state(rng);
  Vector6 da = Vector6::Zero(), db = Vector6::Zero();
  for (int i = 0; i < 50; ++i) {
    da = sample_disturbance_step(da, x, m, 0.01, a);
    db = sample_disturbance_step(db, x, m, 0.01, b);
  }
  EXPECT_EQ(da, db);
}

TEST(Disturbance, NegativeCoefficientRejected) {
  DisturbanceModel m;
  m.c_p.x() = -1.0;
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(Controller, HoverAtReference) {
  quad::VehicleParams params;
  quad::QuadState s;
  s.p = Vector3(0.3, -0.2, 1.0);
  Reference ref;
  ref.p = s.p;
  const Vector u = baseline_controller(s, ref, Vector3::Zero(), ControllerGains{}, params);
  EXPECT_NEAR(u[0], params.mass * params.gravity, 1e-12);
  EXPECT_NEAR(u.tail<3>().norm(), 0.0, 1e-12);
}

TEST(Controller, FeedforwardRaisesThrust) {
  quad::VehicleParams params;
  quad::QuadState s;
  Reference ref;
  const double base = baseline_controller(s, ref, Vector3::Zero(), ControllerGains{}, params)[0];
  for (double c : {0.5, 2.0, 5.0}) {
    const Vector u = baseline_controller(s, ref, Vector3(0.0, 0.0, -c), ControllerGains{}, params);
    EXPECT_NEAR(u[0] - base, c, 1e-12);
  }
  ControllerGains g;
  g.max_thrust = base + 1.0;
  EXPECT_NEAR(baseline_controller(s, ref, Vector3(0.0, 0.0, -5.0), g, params)[0], g.max_thrust, 1e-12);
}

TEST(Reference, AttitudeAndRatesAreConsistent) {
  const Scenario s = make_scenario("fig8");
  constexpr double h = 1e-3;
  for (double t : {1.0, 3.3, 4.7, 6.1}) {
    const Reference r = s.reference(t);
    const Vector3 thrust_axis = (r.a + 9.81 * Vector3::UnitZ()).normalized();
    EXPECT_LT((r.R.col(2) - thrust_axis).norm(), 1e-12);
    EXPECT_LT((r.R.transpose() * r.R - Matrix3::Identity()).norm(), 1e-12);
    const Matrix3 Rp = s.reference(t + h).R;
    const Matrix3 predicted_p = r.R * Eigen::AngleAxisd(r.omega.norm() * h, r.omega.normalized()).toRotationMatrix();
    EXPECT_LT((predicted_p - Rp).norm(), 1e-4);
    const Vector3 omega_p = s.reference(t + h).omega, omega_m = s.reference(t - h).omega;
    EXPECT_LT(((omega_p - omega_m) / (2 * h) - r.alpha).norm(), 1e-2 * std::max(1.0, r.alpha.norm()));
  }
  const Reference hover = make_scenario("payload").reference(1.0);
  EXPECT_EQ(hover.R, Matrix3::Identity());
  EXPECT_EQ(hover.omega, Vector3::Zero());
}

TEST(Controller, InvalidGainsRejected) {
  ControllerGains g;
  g.kv.y() = 0.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(GroundTruth, HoverForceEqualsWeight) {
  quad::VehicleParams params;
  const auto [f, tau] = ground_truth_disturbance(Vector3::Zero(), Vector3::Zero(), Matrix3::Identity(),
                                                 Vector3::Zero(), params);
  EXPECT_NEAR(f.z(), 7.37712, 1e-12);
  EXPECT_NEAR(f.head<2>().norm(), 0.0, 1e-15);
  EXPECT_NEAR(tau.norm(), 0.0, 1e-15);
}

TEST(GroundTruth, PrincipalAxisSpinIsTorqueFree) {
  quad::VehicleParams params;
  for (int axis = 0; axis < 3; ++axis) {
    Vector3 om = Vector3::Zero();
    om[axis] = 7.0;
    const auto [f, tau] = ground_truth_disturbance(Vector3::Zero(), Vector3::Zero(), Matrix3::Identity(), om, params);
    EXPECT_NEAR(tau.norm(), 0.0, 1e-15);
  }
}

TEST(GroundTruth, ExternalConventionRecoversModelDisturbance) {
  quad::VehicleParams params;
  std::mt19937_64 rng(21);
  for (int i = 0; i < 20; ++i) {
    const Vector x = random_aug_state(rng);
    const Vector u = random_input(rng);
    const Vector rates = quad::continuous_dynamics(x, u, Vector::Zero(6), params);
    const Vector6 d = external_disturbance(rates.segment<3>(quad::kVel), rates.segment<3>(quad::kOmega),
                                           quad::rotation(x), x.segment<3>(quad::kOmega), u, params);
    EXPECT_LT((d.head<3>() - quad::disturbance_force(x)).norm(), 1e-12);
    EXPECT_LT((d.tail<3>() - quad::disturbance_torque(x)).norm(), 1e-12);
  }
}

TEST(Plant, FreeFallLosesSpeedAtGravity) {
  quad::VehicleParams params;
  Vector x = quad::augment(quad::QuadState{}, Vector3::Zero(), Vector3::Zero());
  const Vector u = Vector::Zero(4), w = Vector::Zero(6);
  constexpr double dt = 0.01;
  for (int k = 0; k < 100; ++k) {
    const double vz = x[quad::kVel + 2];
    x = quad::integrate_rk4(x, u, w, dt, params);
    EXPECT_NEAR(x[quad::kVel + 2] - vz, -params.gravity * dt, 1e-9);
  }
}

TEST(ClosedLoop, IdealFigureEightGolden) {
  Scenario s = make_scenario("fig8");
  s.mode = DisturbanceMode::kNone;
  s.noise_std = 0.0;
  const TraceLog log = run_closed_loop(s, nullptr, ControllerGains{}, 1);
  ASSERT_FALSE(log.aborted);
  ASSERT_EQ(static_cast<int>(log.steps.size()), 1000);
  const double rmse = position_rmse(log, 0, 3);
  std::cout << "ideal figure-8 position RMSE " << rmse << "\n";
  EXPECT_LT(rmse, kGoldenRmse);
}

TEST(ClosedLoop, IdenticalSeedsIdenticalTraces) {
  const Scenario s = make_scenario("fig8");
  const TraceLog a = run_closed_loop(s, nullptr, ControllerGains{}, 42);
  const TraceLog b = run_closed_loop(s, nullptr, ControllerGains{}, 42);
  const TraceLog c = run_closed_loop(s, nullptr, ControllerGains{}, 43);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
}

TEST(ClosedLoop, PayloadFeedforwardRemovesHeightOffset) {
  const Scenario s = make_scenario("payload");
  OracleEstimator oracle(s);
  const TraceLog with = run_closed_loop(s, &oracle, ControllerGains{}, 3);
  const TraceLog without = run_closed_loop(s, nullptr, ControllerGains{}, 3);
  const double e_with = mean_height_error(with, 4.0);
  const double e_without = mean_height_error(without, 4.0);
  EXPECT_GT(e_without, 0.2);
  EXPECT_LT(e_with, 0.1 * e_without);
}

TEST(ClosedLoop, DivergenceAbortsWithPartialTrace) {
  Scenario s = make_scenario("downwash");
  s.event_force = -60.0;
  s.event_start = 0.5;
  s.event_end = 100.0;
  s.divergence_bound = 5.0;
  const TraceLog log = run_closed_loop(s, nullptr, ControllerGains{}, 3);
  EXPECT_TRUE(log.aborted);
  EXPECT_FALSE(log.diagnostic.empty());
  EXPECT_LT(static_cast<int>(log.steps.size()), s.steps());
}

TEST(ClosedLoop, UnknownScenario) {
  try {
    make_scenario("nope");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown scenario"), std::string::npos);
  }
}

TEST(ClosedLoop, TraceCsvHasCommentAndHeader) {
  Scenario s = make_scenario("hover");
  s.duration = 0.05;
  const TraceLog log = run_closed_loop(s, nullptr, ControllerGains{}, 1);
  std::ostringstream os;
  log.write_csv(os, "abc123");
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# config_hash=abc123");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("t,px_true", 0), 0u);
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5);
}

TEST(Dataset, RoundTrip) {
  Scenario s = make_scenario("stepsine");
  s.duration = 0.5;
  const auto [data, truth] = generate_dataset(s, ControllerGains{}, 4);
  std::stringstream ss;
  write_flight_dataset(ss, data, "h");
  const FlightDataset back = read_flight_dataset(ss);
  ASSERT_EQ(back.rows.size(), data.rows.size());
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    EXPECT_EQ(back.measurement(i), data.measurement(i));
    EXPECT_EQ(back.control(i), data.control(i));
    EXPECT_EQ(back.rows[i].a_v, data.rows[i].a_v);
    EXPECT_EQ(back.rows[i].t, data.rows[i].t);
    EXPECT_EQ(back.disturbance(i, s.vehicle), data.disturbance(i, s.vehicle));
  }
  EXPECT_NEAR(back.dt_mean, 2.5e-3, 1e-12);
  EXPECT_NE(back.summary().find("200 rows"), std::string::npos);
}

TEST(Dataset, NoiseFreeRowsRecoverTrueDisturbance) {
  Scenario s = make_scenario("stepsine");
  s.duration = 2.0;
  s.noise_std = 0.0;
  const auto [data, truth] = generate_dataset(s, ControllerGains{}, 4);
  for (std::size_t i = 0; i < data.rows.size(); ++i) {
    EXPECT_LT((data.disturbance(i, s.vehicle) - truth[i]).norm(), 1e-12);
  }
}

TEST(Dataset, Errors) {
  std::istringstream empty("");
  EXPECT_THROW(read_flight_dataset(empty), ParseError);
  const std::string hdr = std::string(kDatasetHeader) + "\n";
  std::string row0 = "0,0,0,0,0,0,0,1,0,0,0,0,0,0,0,0,0,0,0,0,7,0,0,0\n";
  std::string row1 = "0.0025,0,0,0,0,0,0,1,0,0,0,0,0,0,0,0,0,0,0,0,7,0,0,0\n";
  std::istringstream bad_header("t,px\n" + row0);
  EXPECT_THROW(read_flight_dataset(bad_header), ParseError);
  std::istringstream reversed(hdr + row1 + row0);
  EXPECT_THROW(read_flight_dataset(reversed), ParseError);
  std::istringstream gap(hdr + row0 + "0.01,0,0,0,0,0,0,1,0,0,0,0,0,0,0,0,0,0,0,0,7,0,0,0\n");
  EXPECT_THROW(read_flight_dataset(gap), ParseError);
  std::istringstream bad_cell(hdr + "0,0,0,x,0,0,0,1,0,0,0,0,0,0,0,0,0,0,0,0,7,0,0,0\n");
  try {
    read_flight_dataset(bad_cell);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 2);
    EXPECT_EQ(e.column(), 4);
  }
  std::istringstream short_row(hdr + "0,0,0\n");
  EXPECT_THROW(read_flight_dataset(short_row), ParseError);
  std::istringstream ok(hdr + row0 + row1);
  EXPECT_EQ(read_flight_dataset(ok).rows.size(), 2u);
}
