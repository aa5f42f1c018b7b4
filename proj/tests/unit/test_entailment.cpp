#include <doctest.h>

#include <random>
#include <set>
#include <thread>

#include "expect_error.hpp"
#include "semprobe/entailment.hpp"
#include "semprobe/log.hpp"
#include "semprobe/text.hpp"
#include "tempdir.hpp"

using namespace semprobe;
using testutil::code_of;
using testutil::TempDir;

namespace {

/// Asymmetric judge driven by an explicit list of ordered entailing pairs.
class TableBackend final : public EntailmentBackend {
 public:
  explicit TableBackend(std::set<std::pair<std::string, std::string>> yes) : yes_(std::move(yes)) {}
  BackendKind kind() const override { return BackendKind::LLM_JUDGE; }
  EntailmentJudgment judge(std::string_view a, std::string_view b) const override {
    ++calls;
    const bool e = a == b || yes_.count({std::string(a), std::string(b)});
    return {e ? EntailmentLabel::ENTAILMENT : EntailmentLabel::NEUTRAL, kind(), false};
  }
  mutable std::atomic<int> calls{0};

 private:
  std::set<std::pair<std::string, std::string>> yes_;
};

std::string random_text(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces{"the", "A", "an", "Paris", "paris", ".", ",", "  ", "rome!", "It", "is"};
  std::string s;
  const int n = 1 + static_cast<int>(rng() % 4);
  for (int i = 0; i < n; ++i) s += pieces[rng() % pieces.size()] + (rng() % 2 ? " " : "");
  return s;
}

}  // namespace

TEST_CASE("normalization") {
  CHECK(normalize_answer("The  Eiffel Tower!") == "eiffel tower");
  CHECK(normalize_answer("an apple, a pear") == "apple pear");
  CHECK(normalized_tokens("  It's   Paris. ") == std::vector<std::string>{"its", "paris"});
  CHECK(normalize_answer("Café") == "café");
}

TEST_CASE("lexical backend") {
  LexicalBackend lex;
  CHECK(entails("Paris", "paris.", lex).label == EntailmentLabel::ENTAILMENT);
  CHECK(entails("Paris", "Rome", lex).label == EntailmentLabel::NEUTRAL);
  CHECK(entails("Paris", "Rome", lex).source == BackendKind::LEXICAL);
  CHECK(bidirectional_equivalent("x", "x", lex));
  CHECK(code_of([&] { entails("  ", "Paris", lex); }) == ErrorCode::EmptyText);
  CHECK(code_of([&] { entails("Paris", "", lex); }) == ErrorCode::EmptyText);
}

TEST_CASE("lexical backend is an equivalence relation") {
  LexicalBackend lex;
  std::mt19937_64 rng(9);
  std::vector<std::string> texts;
  while (texts.size() < 60) {
    auto t = random_text(rng);
    if (!trim(t).empty()) texts.push_back(t);
  }
  auto eq = [&](const std::string& a, const std::string& b) { return bidirectional_equivalent(a, b, lex); };
  for (const auto& a : texts) {
    CHECK(eq(a, a));
    for (const auto& b : texts) {
      CHECK(eq(a, b) == eq(b, a));
      if (!eq(a, b)) continue;
      for (const auto& c : texts)
        if (eq(b, c)) CHECK(eq(a, c));
    }
  }
}

TEST_CASE("bidirectional equivalence needs both directions") {
  TableBackend both({{"Paris", "It's Paris"}, {"It's Paris", "Paris"}});
  CHECK(bidirectional_equivalent("Paris", "It's Paris", both));
  CHECK(bidirectional_equivalent("It's Paris", "Paris", both));
  TableBackend one({std::pair<std::string, std::string>{"Paris", "It's Paris"}});
  CHECK_FALSE(bidirectional_equivalent("Paris", "It's Paris", one));
  CHECK_FALSE(bidirectional_equivalent("It's Paris", "Paris", one));
}

TEST_CASE("meaning oracle") {
  MeaningOracleBackend o({{"paris", "m0"}, {"it is paris", "m0"}, {"rome", "m1"}});
  CHECK(bidirectional_equivalent("paris", "it is paris", o));
  CHECK_FALSE(bidirectional_equivalent("paris", "rome", o));
  CHECK(o.judge("unknown", "unknown").label == EntailmentLabel::ENTAILMENT);
  CHECK(o.judge("unknown", "paris").label == EntailmentLabel::NEUTRAL);

  MeaningOracleBackend noisy({{"paris", "m0"}, {"it is paris", "m0"}, {"rome", "m1"}}, 0.5, 7);
  MeaningOracleBackend noisy_again({{"paris", "m0"}, {"it is paris", "m0"}, {"rome", "m1"}}, 0.5, 7);
  for (const char* a : {"paris", "it is paris", "rome"})
    for (const char* b : {"paris", "it is paris", "rome"})
      CHECK(noisy.judge(a, b).label == noisy_again.judge(a, b).label);
}

TEST_CASE("entailment cache: round trip, directionality, persistence") {
  TempDir dir;
  const auto path = dir / "cache.jsonl";
  {
    EntailmentCache cache(path);
    CHECK_FALSE(cache.get("a", "b", BackendKind::NLI_HTTP).has_value());
    cache.put("a", "b", BackendKind::NLI_HTTP, EntailmentLabel::CONTRADICTION);
    CHECK(cache.get("a", "b", BackendKind::NLI_HTTP) == EntailmentLabel::CONTRADICTION);
    CHECK_FALSE(cache.get("b", "a", BackendKind::NLI_HTTP).has_value());
    CHECK_FALSE(cache.get("a", "b", BackendKind::LLM_JUDGE).has_value());
    cache.put("a", "b", BackendKind::NLI_HTTP, EntailmentLabel::ENTAILMENT);
  }
  EntailmentCache reopened(path);
  CHECK(reopened.get("a", "b", BackendKind::NLI_HTTP) == EntailmentLabel::ENTAILMENT);
  CHECK(reopened.size() == 1);
  CHECK_FALSE(reopened.rebuilt());
  const auto text = testutil::slurp(path);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
}

TEST_CASE("entailment cache: corrupt journal is rebuilt with a warning") {
  TempDir dir;
  std::vector<std::string> warnings;
  const auto prev = set_warning_sink([&](std::string_view m) { warnings.emplace_back(m); });
  testutil::spit(dir / "bad.jsonl", "{\"a_hash\":\"zz\"}\n");
  EntailmentCache bad(dir / "bad.jsonl");
  testutil::spit(dir / "garbage.jsonl", "not json\n");
  EntailmentCache garbage(dir / "garbage.jsonl");
  set_warning_sink(prev);
  CHECK(bad.rebuilt());
  CHECK(garbage.rebuilt());
  CHECK(bad.size() == 0);
  CHECK(warnings.size() == 2);
}

TEST_CASE("cached backend marks hits and calls the inner backend once per ordered pair") {
  TempDir dir;
  auto inner = std::make_shared<TableBackend>(std::set<std::pair<std::string, std::string>>{{"a", "b"}});
  CachedBackend cached(inner, std::make_shared<EntailmentCache>(dir / "c.jsonl"));
  const auto first = cached.judge("a", "b");
  const auto second = cached.judge("a", "b");
  CHECK_FALSE(first.cached);
  CHECK(second.cached);
  CHECK(second.label == EntailmentLabel::ENTAILMENT);
  CHECK(cached.judge("b", "a").label == EntailmentLabel::NEUTRAL);
  CHECK(inner->calls == 2);

  std::vector<std::jthread> pool;
  for (int t = 0; t < 8; ++t)
    pool.emplace_back([&] {
      for (int i = 0; i < 20; ++i) cached.judge("x" + std::to_string(i), "y");
    });
  pool.clear();
  CHECK(inner->calls == 22);
  CHECK(cached.inner_calls() == 22);
}
