#include <doctest.h>

#include <cstring>
#include <random>

#include <omp.h>

#include "semprobe/kernels.hpp"

using namespace semprobe;

namespace {

template <typename T>
bool same_bytes(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

FeatureMatrix random_matrix(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> g;
  FeatureMatrix x(n, d);
  for (auto& v : x.data) v = g(rng);
  return x;
}

}  // namespace

TEST_CASE("sigmoid and softplus stay finite at the extremes") {
  CHECK(kernels::sigmoid(0.0) == 0.5);
  CHECK(kernels::sigmoid(-800.0) >= 0.0);
  CHECK(kernels::sigmoid(800.0) == 1.0);
  CHECK(kernels::softplus(800.0) == 800.0);
  CHECK(kernels::softplus(-800.0) >= 0.0);
  CHECK(kernels::softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("parallel kernels agree with the serial references bit for bit") {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> g;
  const int saved = omp_get_max_threads();
  for (int threads : {1, 2, 3, 8}) {
    kernels::set_num_threads(threads);
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t n = 1 + rng() % 3000, d = 1 + rng() % 40;
      const auto x = random_matrix(rng, n, d);
      std::vector<std::uint8_t> y(n);
      for (auto& v : y) v = rng() % 2;
      std::vector<double> w(d);
      for (auto& v : w) v = g(rng);
      const double b = g(rng);
      std::vector<double> g1(d + 1), g2(d + 1);
      const double f1 = kernels::logistic_objective(x, y, w, b, 0.7, g1);
      const double f2 = kernels::logistic_objective_serial(x, y, w, b, 0.7, g2);
      CHECK(std::memcmp(&f1, &f2, sizeof f1) == 0);
      CHECK(same_bytes(g1, g2));
      CHECK(same_bytes(kernels::predict_proba(x, w, b), kernels::predict_proba_serial(x, w, b)));
      CHECK(same_bytes(kernels::decision_function(x, w, b), kernels::decision_function_serial(x, w, b)));
    }
  }
  kernels::set_num_threads(saved);
}

TEST_CASE("batched query scoring matches the serial reference") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3, -0.01);
  std::vector<GenerationSet> sets;
  std::vector<SemanticClustering> clusterings;
  std::vector<std::optional<double>> pt;
  for (int q = 0; q < 500; ++q) {
    GenerationSet s;
    s.id = "q" + std::to_string(q);
    s.greedy = {"g", {u(rng)}, 0.0};
    SemanticClustering c;
    for (int i = 0; i < 10; ++i) {
      s.samples.push_back({"s", {u(rng), u(rng)}, 1.0});
      const std::size_t k = rng() % 3;
      if (k >= c.clusters.size()) c.clusters.push_back({});
      c.clusters[std::min(k, c.clusters.size() - 1)].push_back(i);
    }
    sets.push_back(s);
    clusterings.push_back(c);
    pt.push_back(q % 3 ? std::optional<double>(0.1 * (q % 10)) : std::nullopt);
  }
  const auto a = kernels::score_queries(sets, clusterings, pt);
  const auto b = kernels::score_queries_serial(sets, clusterings, pt);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(std::memcmp(&a[i].semantic_entropy_discrete, &b[i].semantic_entropy_discrete, sizeof(double)) == 0);
    CHECK(*a[i].semantic_entropy_mc == *b[i].semantic_entropy_mc);
    CHECK(*a[i].naive_entropy == *b[i].naive_entropy);
    CHECK(a[i].p_true == b[i].p_true);
  }
}
