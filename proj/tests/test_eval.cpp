#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "neuromhe/eval.hpp"
#include "neuromhe/validate.hpp"
#include "test_util.hpp"

using namespace neuromhe;
using namespace neuromhe::testing;

namespace {

const WeightLayout kQuadLayout{24, 18, 6};

sim::TraceLog synthetic_trace(std::mt19937_64& rng, int n) {
  sim::TraceLog log;
  for (int k = 0; k < n; ++k) {
    sim::StepRecord r;
    r.t = 0.01 * k;
    r.x_true = random_aug_state(rng);
    r.x_hat = r.x_true;
    r.ref.p = r.x_true.head<3>();
    r.u = random_input(rng);
    log.steps.push_back(r);
  }
  return log;
}

train::WeightPolicy tuned_fixed_policy() {
  WeightSpec w;
  w.P = Vector::Ones(24);
  w.R = Vector::Constant(18, 100.0);
  w.Q = Vector::Constant(6, 1e-2);
  w.gamma1 = 0.9;
  w.gamma2 = 0.9;
  return train::WeightPolicy::fixed(weights_to_raw(w), w.layout());
}

}  // namespace

TEST(Stats, PerfectEstimateGivesZeroRmse) {
  std::mt19937_64 rng(80);
  const sim::TraceLog log = synthetic_trace(rng, 25);
  const eval::TrackingRmse t = eval::tracking_rmse(log);
  const eval::DisturbanceRmse d = eval::trace_disturbance_rmse(log);
  EXPECT_EQ(t.norm, 0.0);
  EXPECT_EQ(t.axis, Vector3::Zero());
  for (double v : {d.fxy, d.fz, d.txy, d.tz, d.f, d.tau}) EXPECT_EQ(v, 0.0);
}

TEST(Stats, ConstantOffsetRmseIsTheOffset) {
  std::mt19937_64 rng(81);
  sim::TraceLog log = synthetic_trace(rng, 30);
  for (auto& r : log.steps) {
    r.x_true[2] += 0.3;
    r.x_hat[quad::kDistForce + 2] += 0.7;
    r.x_hat[quad::kDistTorque + 2] -= 0.05;
  }
  EXPECT_NEAR(eval::tracking_rmse(log).axis[2], 0.3, 1e-12);
  EXPECT_NEAR(eval::tracking_rmse(log).axis[0], 0.0, 1e-15);
  const eval::DisturbanceRmse d = eval::trace_disturbance_rmse(log);
  EXPECT_NEAR(d.fz, 0.7, 1e-12);
  EXPECT_NEAR(d.f, 0.7, 1e-12);
  EXPECT_NEAR(d.tz, 0.05, 1e-12);
  EXPECT_NEAR(d.fxy, 0.0, 1e-12);
}

TEST(Stats, HorizontalMagnitudeMatchesDuplicateComputation) {
  std::mt19937_64 rng(82);
  std::vector<Vector6> est, truth;
  double sum = 0.0, sum_t = 0.0;
  for (int k = 0; k < 40; ++k) {
    est.push_back(random_vector(rng, 6, 2.0));
    truth.push_back(random_vector(rng, 6, 2.0));
    const double a = std::hypot(est.back()[0], est.back()[1]) - std::hypot(truth.back()[0], truth.back()[1]);
    const double b = std::hypot(est.back()[3], est.back()[4]) - std::hypot(truth.back()[3], truth.back()[4]);
    sum += a * a;
    sum_t += b * b;
  }
  const eval::DisturbanceRmse d = eval::disturbance_rmse(est, truth);
  EXPECT_NEAR(d.fxy, std::sqrt(sum / 40), 1e-14);
  EXPECT_NEAR(d.txy, std::sqrt(sum_t / 40), 1e-14);
  est.pop_back();
  EXPECT_THROW(eval::disturbance_rmse(est, truth), DomainError);
}

TEST(Stats, QuantilesInterpolateLinearly) {
  const std::vector<double> v = {4.0, 1.0, 3.0, 2.0};
  const eval::Quartiles q = eval::quartiles(v);
  EXPECT_DOUBLE_EQ(q.q1, 1.75);
  EXPECT_DOUBLE_EQ(q.median, 2.5);
  EXPECT_DOUBLE_EQ(q.q3, 3.25);
  EXPECT_DOUBLE_EQ(eval::median({5.0, 1.0, 3.0}), 3.0);
  EXPECT_THROW(eval::median({}), DomainError);
}

TEST(Stats, PRateSignFollowsOrdering) {
  EXPECT_DOUBLE_EQ(eval::p_rate(10.0, 6.0), 40.0);
  EXPECT_LT(eval::p_rate(1.0, 1.5), 0.0);
  EXPECT_THROW(eval::p_rate(0.0, 1.0), DomainError);
}

TEST(Stats, LinearFitRecoversLineAndScoresScatter) {
  const std::vector<double> x = {10, 20, 40, 60, 80, 100};
  std::vector<double> y;
  for (double v : x) y.push_back(0.3 * v + 2.0);
  const eval::LinearFit f = eval::linear_fit(x, y);
  EXPECT_NEAR(f.slope, 0.3, 1e-12);
  EXPECT_NEAR(f.intercept, 2.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  // Hand-computed: x = 1..4, y = 1, 3, 2, 4 gives slope 0.8 and R^2 = 0.64.
  const eval::LinearFit g = eval::linear_fit({1, 2, 3, 4}, {1, 3, 2, 4});
  EXPECT_NEAR(g.slope, 0.8, 1e-12);
  EXPECT_NEAR(g.r2, 0.64, 1e-12);
}

TEST(Stats, EpisodeCsvHasHashHeaderAndRows) {
  std::vector<eval::EpisodeMetrics> rows(3);
  std::ostringstream os;
  eval::write_episode_csv(os, rows, "abc");
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# config_hash=abc");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("seed,", 0), 0u);
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 3);
}

TEST(Batch, ParallelEvaluationMatchesSerialBitwise) {
  sim::Scenario sc = sim::make_scenario("fig8");
  sc.duration = 0.5;
  const train::WeightPolicy policy = tuned_fixed_policy();
  train::RlHyper hyper;
  const std::vector<std::uint64_t> seeds = {3, 4, 5, 6};
  const auto serial = eval::evaluate_episodes(sc, policy, hyper, seeds, 1);
  const auto parallel = eval::evaluate_episodes(sc, policy, hyper, seeds, 4);
  ASSERT_EQ(serial.size(), parallel.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    EXPECT_EQ(serial[i].seed, seeds[i]);
    EXPECT_EQ(serial[i].trace_hash, parallel[i].trace_hash);
    EXPECT_EQ(serial[i].tracking.norm, parallel[i].tracking.norm);
    EXPECT_EQ(serial[i].mean_loss, parallel[i].mean_loss);
  }
  EXPECT_NE(serial[0].trace_hash, serial[1].trace_hash);
}

TEST(Batch, EvaluationDoesNotMutateThePolicy) {
  sim::Scenario sc = sim::make_scenario("hover");
  sc.duration = 0.3;
  const train::WeightPolicy policy = tuned_fixed_policy();
  const Vector before = policy.parameters();
  train::RlHyper hyper;
  hyper.estimator.learn = true;
  eval::evaluate_episodes(sc, policy, hyper, {1}, 1);
  EXPECT_EQ(policy.parameters(), before);
}

TEST(PolicyCheckpoint, FixedAndNeuralRoundTrip) {
  const train::WeightPolicy fixed = train::WeightPolicy::fixed(Vector::LinSpaced(49, -1, 1), kQuadLayout, 1e-4,
                                                               100.0, 0.5);
  const train::WeightPolicy back = train::policy_from_checkpoint(train::to_checkpoint(fixed, 2), kQuadLayout);
  EXPECT_FALSE(back.is_neural());
  EXPECT_EQ(back.parameters(), fixed.parameters());
  EXPECT_EQ(back.r_floor(), 0.5);

  const train::WeightPolicy neural =
      train::WeightPolicy::neural(MlpParams::init_uniform(18, 6, 5, 49, 3), kQuadLayout);
  const train::WeightPolicy nb = train::policy_from_checkpoint(train::to_checkpoint(neural, 3), kQuadLayout);
  EXPECT_TRUE(nb.is_neural());
  EXPECT_EQ(nb.parameters(), neural.parameters());

  const WeightLayout small{4, 3, 2};
  EXPECT_THROW(train::policy_from_checkpoint(train::to_checkpoint(neural, 3), small), ConfigError);
}

TEST(Oracles, KfVsDenseIsIndependentOfThreadCount) {
  const validate::OracleReport a = validate::kf_vs_dense(8, 90, 4, 1);
  const validate::OracleReport b = validate::kf_vs_dense(8, 90, 4, 3);
  EXPECT_EQ(a.rel_errs, b.rel_errs);
  EXPECT_LT(a.max_rel_err, 1e-8);
  EXPECT_EQ(a.gradient_failures, 0);
}

TEST(Oracles, CorruptedCoefficientIsDetected) {
  const validate::OracleReport r = validate::kf_vs_dense(4, 91, 3, 1, true);
  EXPECT_GT(r.max_rel_err, 1e-6);
}

TEST(Oracles, BarrierDistancesShrink) {
  const std::vector<double> d = validate::barrier_distances({1e-2, 1e-4, 1e-6});
  ASSERT_EQ(d.size(), 3u);
  EXPECT_GT(d[0], d[1]);
  EXPECT_GT(d[1], d[2]);
  EXPECT_LT(d[2], 1e-4);
}

TEST(Oracles, TimingTableHasOneRowPerHorizon) {
  const auto rows = validate::time_gradients({2, 4}, 3, 1, 5);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].horizon, 4);
  EXPECT_GT(rows[0].kf_ms, 0.0);
  EXPECT_GT(rows[0].dense_ms, 0.0);
}
