#include <doctest.h>

#include <cmath>
#include <random>

#include "expect_error.hpp"
#include "oracles.hpp"
#include "semprobe/uncertainty.hpp"

using namespace semprobe;
using testutil::code_of;

namespace {

SemanticClustering of_sizes(const std::vector<std::size_t>& sizes) {
  SemanticClustering c;
  std::size_t next = 0;
  for (auto s : sizes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < s; ++i) members.push_back(next++);
    c.clusters.push_back(members);
  }
  return c;
}

GenerationSet set_with(const std::vector<std::vector<double>>& lps) {
  GenerationSet g;
  g.id = "q";
  g.greedy = {"g", {-0.5, -1.5}, 0.0};
  for (std::size_t i = 0; i < lps.size(); ++i) g.samples.push_back({"s" + std::to_string(i), lps[i], 1.0});
  g.decode_config.n_samples = static_cast<int>(lps.size());
  return g;
}

}  // namespace

TEST_CASE("sequence log-prob is the token sum") {
  CHECK(sequence_log_prob({"x", {-1.0, -2.0}, 1.0}) == -3.0);
  CHECK(sequence_log_prob({"x", {-0.5}, 1.0}) == -0.5);
  CHECK(code_of([] { sequence_log_prob({"x", {}, 1.0}); }) == ErrorCode::NoLogProbs);
}

TEST_CASE("log-sum-exp is stable far below zero") {
  const std::vector<double> xs{-1000.0, -1000.0};
  CHECK(log_sum_exp(xs) == doctest::Approx(-1000.0 + std::log(2.0)).epsilon(1e-15));
  const std::vector<double> deep{-1e4, -1e4 - 1};
  const long double ref = -1e4L + std::log1p(std::exp(-1.0L));
  CHECK(log_sum_exp(deep) == doctest::Approx(static_cast<double>(ref)).epsilon(1e-15));
  CHECK(std::isinf(log_sum_exp({})));
}

TEST_CASE("cluster log-probs sum member probabilities") {
  auto g = set_with({{std::log(0.2)}, {std::log(0.3)}, {std::log(0.1)}});
  SemanticClustering c{{{0, 1}, {2}}};
  const auto lp = cluster_log_probs(g, c);
  REQUIRE(lp.size() == 2);
  CHECK(lp[0] == doctest::Approx(std::log(0.5)).epsilon(1e-14));
  CHECK(lp[1] == doctest::Approx(std::log(0.1)).epsilon(1e-14));
}

TEST_CASE("cluster log-probs conserve total mass") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4.0, -0.01);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::vector<double>> lps(10);
    for (auto& s : lps) s = {u(rng), u(rng)};
    const auto g = set_with(lps);
    SemanticClustering c{{{0, 3, 4}, {1, 2}, {5}, {6, 7, 8, 9}}};
    double total = 0, per_cluster = 0;
    for (const auto& s : g.samples) total += std::exp(sequence_log_prob(s));
    for (double v : cluster_log_probs(g, c)) per_cluster += std::exp(v);
    CHECK(per_cluster == doctest::Approx(total).epsilon(1e-12));
  }
}

TEST_CASE("monte-carlo semantic entropy") {
  const std::vector<double> two{-1.0, -2.0};
  CHECK(semantic_entropy_mc(two) == 1.5);
  const std::vector<double> zero{0.0};
  CHECK(semantic_entropy_mc(zero) == 0.0);
  const std::vector<double> three{-3.0};
  CHECK(semantic_entropy_mc(three) == 3.0);
  CHECK(code_of([] { semantic_entropy_mc({}); }) == ErrorCode::EmptyClusters);
  const std::vector<double> swapped{-2.0, -1.0};
  CHECK(semantic_entropy_mc(swapped) == semantic_entropy_mc(two));
}

TEST_CASE("discrete semantic entropy") {
  const double ref = -(0.3 * std::log(0.3) * 2 + 0.4 * std::log(0.4));
  CHECK(std::abs(semantic_entropy_discrete(of_sizes({3, 3, 4}), 10) - 1.08890) < 1e-5);
  CHECK(semantic_entropy_discrete(of_sizes({3, 3, 4}), 10) == doctest::Approx(ref).epsilon(1e-14));
  CHECK(semantic_entropy_discrete(of_sizes({10}), 10) == 0.0);
  CHECK(std::abs(semantic_entropy_discrete(of_sizes(std::vector<std::size_t>(10, 1)), 10) - std::log(10.0)) < 1e-12);
  CHECK(code_of([] { semantic_entropy_discrete(of_sizes({3, 3}), 7); }) == ErrorCode::BadPartition);
  SemanticClustering overlap{{{0, 1}, {1, 2}}};
  CHECK(code_of([&] { semantic_entropy_discrete(overlap, 3); }) == ErrorCode::BadPartition);
}

TEST_CASE("discrete entropy: bounds, permutation invariance and coarsening") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<std::size_t> sizes;
    for (std::size_t left = n; left > 0;) {
      const std::size_t s = 1 + rng() % left;
      sizes.push_back(s);
      left -= s;
    }
    const double h = semantic_entropy_discrete(of_sizes(sizes), n);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(n)) + 1e-12);
    CHECK(h == doctest::Approx(oracle::entropy_of_counts(sizes)).epsilon(1e-12));
    auto shuffled = sizes;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(semantic_entropy_discrete(of_sizes(shuffled), n) == doctest::Approx(h).epsilon(1e-12));
    if (sizes.size() >= 2) {
      auto merged = sizes;
      merged[0] += merged.back();
      merged.pop_back();
      CHECK(semantic_entropy_discrete(of_sizes(merged), n) <= h + 1e-12);
    }
  }
}

TEST_CASE("naive entropy and negative log-likelihood") {
  CHECK(naive_entropy(set_with({{-1, -1}, {-1, -1}})) == 1.0);
  CHECK(naive_entropy(set_with({{-0.5, -1.5}})) == 1.0);
  CHECK(naive_entropy(set_with({{0.0, 0.0}, {0.0}})) == 0.0);
  CHECK(code_of([] { naive_entropy(set_with({{-1}, {}})); }) == ErrorCode::NoLogProbs);
  CHECK(neg_log_likelihood({"g", {-0.5, -1.5}, 0.0}) == 1.0);
  CHECK(neg_log_likelihood({"g", {0.0}, 0.0}) == 0.0);
  CHECK(code_of([] { neg_log_likelihood({"g", {}, 0.0}); }) == ErrorCode::NoLogProbs);
}

TEST_CASE("score_query fills what the log-probs allow") {
  auto g = set_with({{-1.0}, {-2.0}, {-1.0}});
  SemanticClustering c{{{0, 2}, {1}}};
  const auto r = score_query(g, c, 0.25);
  CHECK(r.n_clusters == 2);
  CHECK(r.n_samples == 3);
  REQUIRE(r.semantic_entropy_mc.has_value());
  CHECK(*r.semantic_entropy_mc == doctest::Approx(-(std::log(2 * std::exp(-1.0)) - 2.0) / 2).epsilon(1e-14));
  CHECK(r.p_true == std::optional<double>(0.25));
  CHECK(r.neg_log_likelihood == std::optional<double>(1.0));

  g.samples[1].token_log_probs.clear();
  g.greedy.token_log_probs.clear();
  const auto bare = score_query(g, c);
  CHECK_FALSE(bare.semantic_entropy_mc.has_value());
  CHECK_FALSE(bare.naive_entropy.has_value());
  CHECK_FALSE(bare.neg_log_likelihood.has_value());
  CHECK(bare.semantic_entropy_discrete == doctest::Approx(oracle::entropy_of_counts({2, 1})).epsilon(1e-14));
}
