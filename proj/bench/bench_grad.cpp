#include <benchmark/benchmark.h>

#include <map>
#include <random>

#include "neuromhe/eval.hpp"
#include "neuromhe/gradkf.hpp"
#include "neuromhe/validate.hpp"

using namespace neuromhe;

namespace {

const validate::SolvedInstance& instance(int horizon) {
  static std::map<int, validate::SolvedInstance> cache;
  auto it = cache.find(horizon);
  if (it == cache.end()) {
    std::mt19937_64 rng(7 + static_cast<std::uint64_t>(horizon));
    it = cache.emplace(horizon, validate::solve_random_instance(rng, horizon, true)).first;
  }
  return it->second;
}

void BM_KfGradient(benchmark::State& state) {
  const auto& s = instance(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(kf_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P));
  }
  state.SetComplexityN(state.range(0));
}

void BM_DenseKktGradient(benchmark::State& state) {
  const auto& s = instance(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(dense_kkt_gradient(s.coeffs, s.cost.window().prior_grad, s.cost.weights().P));
  }
  state.SetComplexityN(state.range(0));
}

train::WeightPolicy bench_policy() {
  WeightSpec w;
  w.P = Vector::Ones(24);
  w.R = Vector::Constant(18, 100.0);
  w.Q = Vector::Constant(6, 1e-2);
  w.gamma1 = 0.9;
  w.gamma2 = 0.9;
  return train::WeightPolicy::fixed(weights_to_raw(w), w.layout());
}

// range(0) is the thread count; 1 selects the serial loop.
void BM_EvaluateEpisodes(benchmark::State& state) {
  sim::Scenario sc = sim::make_scenario("fig8");
  sc.duration = 0.5;
  const train::WeightPolicy policy = bench_policy();
  const train::RlHyper hyper;
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4};
  for (auto _ : state) {
    benchmark::DoNotOptimize(eval::evaluate_episodes(sc, policy, hyper, seeds, static_cast<int>(state.range(0))));
  }
}

}  // namespace

BENCHMARK(BM_KfGradient)->Arg(10)->Arg(20)->Arg(40)->Arg(60)->Arg(80)->Arg(100)->Complexity()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DenseKktGradient)->Arg(10)->Arg(20)->Arg(40)->Complexity()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_EvaluateEpisodes)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
