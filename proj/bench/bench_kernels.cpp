// Parallel kernels against their serial references.
//   ./semprobe_bench --benchmark_filter=Objective

#include <benchmark/benchmark.h>

#include <random>

#include <omp.h>

#include "semprobe/kernels.hpp"

using namespace semprobe;

namespace {

struct Problem {
  FeatureMatrix x;
  std::vector<std::uint8_t> y;
  std::vector<double> w;
  double b = 0.1;
};

Problem make_problem(std::size_t n, std::size_t d) {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> g;
  Problem p;
  p.x = FeatureMatrix(n, d);
  for (auto& v : p.x.data) v = g(rng);
  p.y.resize(n);
  for (auto& v : p.y) v = rng() % 2;
  p.w.resize(d);
  for (auto& v : p.w) v = g(rng) / std::sqrt(static_cast<double>(d));
  return p;
}

struct Queries {
  std::vector<GenerationSet> sets;
  std::vector<SemanticClustering> clusterings;
  std::vector<std::optional<double>> p_true;
};

Queries make_queries(std::size_t n) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, -0.01);
  Queries q;
  for (std::size_t i = 0; i < n; ++i) {
    GenerationSet s;
    s.id = "q" + std::to_string(i);
    s.greedy = {"g", {u(rng), u(rng)}, 0.0};
    SemanticClustering c;
    for (std::size_t k = 0; k < 10; ++k) {
      s.samples.push_back({"s", std::vector<double>(12, u(rng)), 1.0});
      const std::size_t slot = rng() % 4;
      if (slot >= c.clusters.size()) c.clusters.push_back({});
      c.clusters[std::min(slot, c.clusters.size() - 1)].push_back(k);
    }
    q.sets.push_back(std::move(s));
    q.clusterings.push_back(std::move(c));
    q.p_true.push_back(0.5);
  }
  return q;
}

template <bool Parallel>
void BM_Objective(benchmark::State& state) {
  const auto p = make_problem(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  std::vector<double> grad(p.w.size() + 1);
  for (auto _ : state) {
    const double f = Parallel ? kernels::logistic_objective(p.x, p.y, p.w, p.b, 1.0, grad)
                              : kernels::logistic_objective_serial(p.x, p.y, p.w, p.b, 1.0, grad);
    benchmark::DoNotOptimize(f);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_PredictProba(benchmark::State& state) {
  const auto p = make_problem(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  for (auto _ : state) {
    auto out = Parallel ? kernels::predict_proba(p.x, p.w, p.b) : kernels::predict_proba_serial(p.x, p.w, p.b);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <bool Parallel>
void BM_ScoreQueries(benchmark::State& state) {
  const auto q = make_queries(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    auto out = Parallel ? kernels::score_queries(q.sets, q.clusterings, q.p_true)
                        : kernels::score_queries_serial(q.sets, q.clusterings, q.p_true);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void shapes(benchmark::internal::Benchmark* b) {
  for (long n : {2000, 20000}) b->Args({n, 64})->Args({n, 4096});
}

}  // namespace

BENCHMARK(BM_Objective<false>)->Name("Objective/serial")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_Objective<true>)->Name("Objective/omp")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_PredictProba<false>)->Name("PredictProba/serial")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_PredictProba<true>)->Name("PredictProba/omp")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_ScoreQueries<false>)->Name("ScoreQueries/serial")->Arg(1000)->Arg(20000)->UseRealTime();
BENCHMARK(BM_ScoreQueries<true>)->Name("ScoreQueries/omp")->Arg(1000)->Arg(20000)->UseRealTime();

BENCHMARK_MAIN();
