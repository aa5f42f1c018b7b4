#include <doctest.h>

#include <random>

#include "expect_error.hpp"
#include "oracles.hpp"
#include "semprobe/clustering.hpp"
#include "tempdir.hpp"

using namespace semprobe;

namespace {

/// Equivalence by a hidden label, or any symmetric relation given by a predicate.
class PredicateBackend final : public EntailmentBackend {
 public:
  explicit PredicateBackend(std::function<bool(std::string_view, std::string_view)> p) : p_(std::move(p)) {}
  BackendKind kind() const override { return BackendKind::ORACLE; }
  EntailmentJudgment judge(std::string_view a, std::string_view b) const override {
    seen.emplace_back(a, b);
    return {p_(a, b) ? EntailmentLabel::ENTAILMENT : EntailmentLabel::NEUTRAL, kind(), false};
  }
  mutable std::vector<std::pair<std::string, std::string>> seen;

 private:
  std::function<bool(std::string_view, std::string_view)> p_;
};

std::vector<std::vector<std::size_t>> canonical(SemanticClustering c) {
  for (auto& b : c.clusters) std::sort(b.begin(), b.end());
  std::sort(c.clusters.begin(), c.clusters.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return c.clusters;
}

}  // namespace

TEST_CASE("clustering examples") {
  PredicateBackend judge([](std::string_view a, std::string_view b) {
    auto paris = [](std::string_view s) { return s == "Paris" || s == "It's Paris"; };
    return a == b || (paris(a) && paris(b));
  });
  const auto c = cluster_generations({"Paris", "It's Paris", "Rome"}, judge);
  CHECK(c.clusters == std::vector<std::vector<std::size_t>>{{0, 1}, {2}});

  LexicalBackend lex;
  CHECK(cluster_generations(std::vector<std::string>(7, "same"), lex).size() == 1);
  std::vector<std::string> distinct;
  for (int i = 0; i < 7; ++i) distinct.push_back("w" + std::to_string(i));
  const auto singletons = cluster_generations(distinct, lex);
  CHECK(singletons.size() == 7);
  CHECK(singletons.is_partition_of(7));
  CHECK(cluster_generations({"only"}, lex).clusters == std::vector<std::vector<std::size_t>>{{0}});
  CHECK(testutil::code_of([&] { cluster_generations({}, lex); }) == ErrorCode::EmptyInput);
}

TEST_CASE("greedy clustering equals the closure partition for equivalence relations") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    const int k = 1 + static_cast<int>(rng() % 5);
    std::vector<std::string> texts;
    std::unordered_map<std::string, std::string> meaning;
    for (std::size_t i = 0; i < n; ++i) {
      const auto m = "m" + std::to_string(rng() % k);
      texts.push_back(m + "-" + std::to_string(rng() % 3));
      meaning[texts.back()] = m;
    }
    MeaningOracleBackend o(meaning);
    const auto greedy = cluster_generations(texts, o);
    REQUIRE(greedy.is_partition_of(n));
    const auto closure = oracle::closure_partition(n, [&](std::size_t i, std::size_t j) {
      return o.judge(texts[i], texts[j]).label == EntailmentLabel::ENTAILMENT;
    });
    CHECK(canonical(greedy) == closure);
  }
}

TEST_CASE("earliest member is the cluster representative") {
  PredicateBackend judge([](std::string_view a, std::string_view b) {
    auto has = [](std::string_view s, char c) { return s.find(c) != std::string_view::npos; };
    return a == b || (has(a, 'x') && has(b, 'x')) || (has(a, 'y') && has(b, 'y'));
  });
  // "y" matches "x" only through the chain, so the representative decides.
  const std::vector<std::string> texts{"x", "xy", "y"};
  CHECK(cluster_generations(texts, judge).clusters == std::vector<std::vector<std::size_t>>{{0, 1}, {2}});
  // With "xy" as representative, "y" joins unless every member must match.
  const std::vector<std::string> hub{"xy", "x", "y"};
  CHECK(cluster_generations(hub, judge).clusters == std::vector<std::vector<std::size_t>>{{0, 1, 2}});
  ClusterOptions all;
  all.compare_all_members = true;
  CHECK(cluster_generations(hub, judge, all).clusters == std::vector<std::vector<std::size_t>>{{0, 1}, {2}});

  // Non-transitive chain: closure merges, greedy does not. Both are partitions.
  const auto closure = oracle::closure_partition(3, [&](std::size_t i, std::size_t j) {
    return judge.judge(texts[i], texts[j]).label == EntailmentLabel::ENTAILMENT;
  });
  CHECK(closure.size() == 1);
}

TEST_CASE("question prefix reaches the backend") {
  PredicateBackend judge([](std::string_view a, std::string_view b) { return a == b; });
  ClusterOptions opts;
  opts.question_prefix = "Q? ";
  cluster_generations({"a", "b"}, judge, opts);
  REQUIRE_FALSE(judge.seen.empty());
  CHECK(judge.seen.front().first.rfind("Q? ", 0) == 0);
  CHECK(judge.seen.front().second.rfind("Q? ", 0) == 0);
}

TEST_CASE("cluster count never grows with a more permissive predicate") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 10;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) texts.push_back(std::to_string(i) + ":" + std::to_string(rng() % 6));
    auto label = [&](std::string_view s) { return std::stoi(std::string(s.substr(s.find(':') + 1))); };
    PredicateBackend strict([&](std::string_view a, std::string_view b) { return label(a) == label(b); });
    PredicateBackend loose([&](std::string_view a, std::string_view b) { return label(a) / 2 == label(b) / 2; });
    const auto s = cluster_generations(texts, strict);
    const auto l = cluster_generations(texts, loose);
    CHECK(l.size() <= s.size());
    CHECK(l.is_partition_of(n));
  }
}

TEST_CASE("random non-transitive judges still yield partitions") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 10;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) texts.push_back("t" + std::to_string(i));
    const auto salt = rng();
    PredicateBackend coin([&](std::string_view a, std::string_view b) {
      return a == b || ((fnv1a64(std::string(a) + std::string(b)) ^ salt) & 1);
    });
    CHECK(cluster_generations(texts, coin).is_partition_of(n));
  }
}

TEST_CASE("clusters jsonl round trip") {
  testutil::TempDir dir;
  std::vector<ClusterRecord> rows{{"q1", {{{0, 2}, {1}}}}, {"q2", {{{0}}}}};
  write_clusters_jsonl(dir / "c.jsonl", rows);
  const auto back = read_clusters_jsonl(dir / "c.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].clustering.clusters == rows[0].clustering.clusters);
  CHECK(back[1].id == "q2");
}
