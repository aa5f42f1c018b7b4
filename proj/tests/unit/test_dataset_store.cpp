#include <doctest.h>

#include <cstring>
#include <random>

#include "oracles.hpp"
#include "semprobe/dataset_store.hpp"
#include "semprobe/error.hpp"
#include "expect_error.hpp"
#include "tempdir.hpp"

using namespace semprobe;
using testutil::TempDir;
using testutil::code_of;

namespace {

ArchiveManifest small_manifest(std::uint32_t d, std::uint32_t layers) {
  ArchiveManifest m;
  m.model_name = "tiny";
  m.hidden_dim = d;
  m.n_layers = layers;
  m.positions = {Position::SLT, Position::TBG};
  m.streams = {Stream::HIDDEN};
  return m;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("qa jsonl: single record, context absent") {
  TempDir dir;
  testutil::spit(dir / "qa.jsonl",
                 R"({"id":"q1","question":"What is the capital of France?","answers":["Paris"],"dataset":"demo"})"
                 "\n");
  const auto recs = read_qa_jsonl(dir / "qa.jsonl");
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].id == "q1");
  CHECK(recs[0].question == "What is the capital of France?");
  CHECK_FALSE(recs[0].context.has_value());
  CHECK(recs[0].answers == std::vector<std::string>{"Paris"});
  CHECK(recs[0].dataset == "demo");
}

TEST_CASE("qa jsonl: empty file, duplicates, malformed lines") {
  TempDir dir;
  testutil::spit(dir / "empty.jsonl", "");
  CHECK(read_qa_jsonl(dir / "empty.jsonl").empty());

  testutil::spit(dir / "dup.jsonl",
                 "{\"id\":\"q1\",\"question\":\"a\",\"answers\":[\"x\"],\"dataset\":\"d\"}\n"
                 "{\"id\":\"q1\",\"question\":\"b\",\"answers\":[\"y\"],\"dataset\":\"d\"}\n");
  CHECK(code_of([&] { read_qa_jsonl(dir / "dup.jsonl"); }) == ErrorCode::DuplicateId);

  testutil::spit(dir / "bad.jsonl", "{\"id\":\"q1\",\"question\":\"a\",\"answers\":[\"x\"],\"dataset\":\"d\"}\n{nope\n");
  try {
    read_qa_jsonl(dir / "bad.jsonl");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find('2') != std::string::npos);
  }
}

TEST_CASE("qa jsonl round trip keeps context") {
  TempDir dir;
  std::vector<QARecord> recs{{"a", "Who?", std::string("ctx"), {"x", "y"}, "t"}, {"b", "What?", std::nullopt, {"z"}, "t"}};
  write_qa_jsonl(dir / "qa.jsonl", recs);
  const auto back = read_qa_jsonl(dir / "qa.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].context == std::optional<std::string>("ctx"));
  CHECK(back[1].answers == std::vector<std::string>{"z"});
}

TEST_CASE("generation sets round trip with default decode config") {
  TempDir dir;
  GenerationSet g;
  g.id = "q1";
  g.greedy = {"Paris", {-0.1}, 0.0};
  for (int i = 0; i < 10; ++i) g.samples.push_back({"Paris " + std::to_string(i), {-0.25, -1.5}, 1.0});
  write_generations_jsonl(dir / "g.jsonl", std::vector<GenerationSet>{g});
  const auto back = read_generations_jsonl(dir / "g.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].samples.size() == 10);
  CHECK(back[0].decode_config.n_samples == 10);
  CHECK(back[0].decode_config.temperature == 1.0);
  CHECK(back[0].decode_config.top_p == 0.9);
  CHECK(back[0].decode_config.top_k == 50);
  CHECK(back[0].samples[3].token_log_probs == std::vector<double>{-0.25, -1.5});
}

TEST_CASE("generation set invariants") {
  GenerationSet g;
  g.id = "q";
  g.greedy = {"x", {}, 0.0};
  g.decode_config.n_samples = 2;
  g.samples = {{"a", {}, 1.0}};
  CHECK(code_of([&] { validate(g); }) == ErrorCode::ParseError);
  g.samples.push_back({"b", {0.5}, 1.0});
  CHECK(code_of([&] { validate(g); }) == ErrorCode::ParseError);
  g.samples.back().token_log_probs = {-0.5};
  CHECK_NOTHROW(validate(g));
}

TEST_CASE("hidden archive: 3 records, d=4, bit-exact round trip") {
  TempDir dir;
  std::vector<HiddenStateRecord> recs;
  for (int i = 0; i < 3; ++i)
    recs.push_back({"q" + std::to_string(i), Position::SLT, Stream::HIDDEN, 1,
                    {1.5f * i, -0.0f, std::numeric_limits<float>::denorm_min(), 3.4e38f}});
  CHECK(write_hidden_archive(small_manifest(4, 2), recs, dir / "h.seph") == 3);
  const auto [m, back] = read_hidden_archive(dir / "h.seph");
  CHECK(m.record_count == 3);
  CHECK(m.hidden_dim == 4);
  CHECK(m.dtype == "f32le");
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(back[i].id == recs[i].id);
    CHECK(bit_equal(back[i].vector, recs[i].vector));
  }
}

TEST_CASE("hidden archive: byte layout of the header and first record") {
  TempDir dir;
  std::vector<HiddenStateRecord> recs{{"ab", Position::TBG, Stream::MLP, 258, {1.0f}}};
  write_hidden_archive(small_manifest(1, 300), recs, dir / "h.seph");
  const auto bytes = testutil::slurp(dir / "h.seph");
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.substr(0, 4) == "SEPH");
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 8 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 16 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3])) << 24;
  };
  CHECK(u32(4) == 1);
  const auto mlen = u32(8);
  const auto manifest = json::parse(bytes.substr(12, mlen));
  CHECK(manifest.at("hidden_dim") == 1);
  CHECK(manifest.at("record_count") == 1);
  std::size_t at = 12 + mlen;
  CHECK(static_cast<unsigned char>(bytes[at]) == 2);
  CHECK(bytes[at + 1] == 0);
  CHECK(bytes.substr(at + 2, 2) == "ab");
  CHECK(bytes[at + 4] == 1);  // TBG
  CHECK(bytes[at + 5] == 2);  // MLP
  CHECK(static_cast<unsigned char>(bytes[at + 6]) == 2);  // 258 little-endian
  CHECK(static_cast<unsigned char>(bytes[at + 7]) == 1);
  CHECK(u32(at + 8) == 0x3f800000u);
  CHECK(bytes.size() == at + 12);
}

TEST_CASE("hidden archive errors") {
  TempDir dir;
  std::vector<HiddenStateRecord> bad{{"q", Position::SLT, Stream::HIDDEN, 0, {1, 2, 3, 4, 5}}};
  CHECK(code_of([&] { write_hidden_archive(small_manifest(4, 1), bad, dir / "x.seph"); }) == ErrorCode::DimMismatch);

  CHECK(write_hidden_archive(small_manifest(4, 1), {}, dir / "empty.seph") == 0);
  const auto [m, none] = read_hidden_archive(dir / "empty.seph");
  CHECK(m.record_count == 0);
  CHECK(none.empty());

  std::vector<HiddenStateRecord> ok{{"q", Position::SLT, Stream::HIDDEN, 0, {1, 2, 3, 4}}};
  write_hidden_archive(small_manifest(4, 1), ok, dir / "ok.seph");
  auto bytes = testutil::slurp(dir / "ok.seph");
  auto corrupt = bytes;
  corrupt[0] = 'X';
  testutil::spit(dir / "magic.seph", corrupt);
  CHECK(code_of([&] { read_hidden_archive(dir / "magic.seph"); }) == ErrorCode::BadMagic);

  auto version = bytes;
  version[4] = 2;
  testutil::spit(dir / "version.seph", version);
  CHECK(code_of([&] { read_hidden_archive(dir / "version.seph"); }) == ErrorCode::VersionUnsupported);

  testutil::spit(dir / "short.seph", bytes.substr(0, bytes.size() - 3));
  CHECK(code_of([&] { read_hidden_archive(dir / "short.seph"); }) == ErrorCode::TruncatedFile);
}

TEST_CASE("hidden archive filters") {
  TempDir dir;
  std::vector<HiddenStateRecord> recs;
  for (int layer : {30, 31, 32})
    for (int q = 0; q < 2; ++q)
      recs.push_back({"q" + std::to_string(q), Position::SLT, Stream::HIDDEN, static_cast<std::uint16_t>(layer),
                      {float(layer), float(q)}});
  auto m = small_manifest(2, 33);
  m.positions = {Position::SLT};
  write_hidden_archive(m, recs, dir / "h.seph");

  ArchiveFilter only31;
  only31.layers = std::vector<int>{31};
  const auto [m31, got] = read_hidden_archive(dir / "h.seph", only31);
  REQUIRE(got.size() == 2);
  CHECK(got[0].layer == 31);
  CHECK(got[1].layer == 31);
  CHECK(got[0].id == "q0");

  ArchiveFilter tbg;
  tbg.position = Position::TBG;
  const auto [mt, empty] = read_hidden_archive(dir / "h.seph", tbg);
  CHECK(empty.empty());
  CHECK(mt.record_count == 6);
  CHECK(mt.n_layers == 33);
}

TEST_CASE("quantile filter: 0..19 with the default band") {
  std::vector<std::pair<std::string, double>> v;
  std::vector<double> raw;
  for (int i = 0; i < 20; ++i) {
    v.emplace_back(std::to_string(i), i);
    raw.push_back(i);
  }
  CHECK(oracle::reference_quantile(raw, 0.55) == doctest::Approx(10.45).epsilon(1e-12));
  CHECK(oracle::reference_quantile(raw, 0.80) == doctest::Approx(15.2).epsilon(1e-12));
  CHECK(quantile_linear(raw, 0.55) == doctest::Approx(oracle::reference_quantile(raw, 0.55)).epsilon(1e-14));
  const auto kept = filter_quantile_band(v, 0.55, 0.80);
  std::vector<std::string> expect;
  for (int i = 0; i <= 10; ++i) expect.push_back(std::to_string(i));
  for (int i = 16; i <= 19; ++i) expect.push_back(std::to_string(i));
  CHECK(kept == expect);
}

TEST_CASE("quantile filter boundaries and errors") {
  std::vector<std::pair<std::string, double>> v{{"a", 3}, {"b", 1}, {"c", 2}, {"d", 5}};
  CHECK(filter_quantile_band(v, 0.0, 1.0) == std::vector<std::string>{"b", "d"});
  std::vector<std::pair<std::string, double>> same{{"a", 2}, {"b", 2}, {"c", 2}};
  CHECK(filter_quantile_band(same).size() == 3);
  CHECK(code_of([&] { filter_quantile_band({}, 0.1, 0.2); }) == ErrorCode::EmptyInput);
  CHECK(code_of([&] { filter_quantile_band(v, 0.8, 0.5); }) == ErrorCode::BadBand);
}

TEST_CASE("quantile filter properties on random inputs") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 60);
    std::vector<std::pair<std::string, double>> v;
    std::vector<double> raw;
    for (int i = 0; i < n; ++i) {
      const double x = trial % 3 == 0 ? std::round(u(rng)) : u(rng);
      v.emplace_back(std::to_string(i), x);
      raw.push_back(x);
    }
    for (double p : {0.0, 0.1, 0.55, 0.8, 1.0})
      CHECK(quantile_linear([&] { auto s = raw; std::sort(s.begin(), s.end()); return s; }(), p) ==
            doctest::Approx(oracle::reference_quantile(raw, p)).epsilon(1e-12));
    const auto narrow = filter_quantile_band(v, 0.55, 0.80);
    const auto wide = filter_quantile_band(v, 0.4, 0.9);
    const std::set<std::string> kept_narrow(narrow.begin(), narrow.end()), kept_wide(wide.begin(), wide.end());
    for (const auto& id : kept_wide) CHECK(kept_narrow.count(id));
    const auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
    CHECK(kept_narrow.count(std::to_string(mn - raw.begin())));
    CHECK(kept_narrow.count(std::to_string(mx - raw.begin())));
  }
}

TEST_CASE("grouped quantile filter applies the band per group") {
  std::vector<std::pair<std::string, double>> v;
  std::vector<std::string> groups;
  for (int i = 0; i < 20; ++i) {
    v.emplace_back("a" + std::to_string(i), i);
    groups.push_back("a");
    v.emplace_back("b" + std::to_string(i), 100 + i);
    groups.push_back("b");
  }
  const auto kept = filter_quantile_band_grouped(v, groups, 0.55, 0.80);
  const std::set<std::string> s(kept.begin(), kept.end());
  CHECK(s.size() == 30);
  CHECK_FALSE(s.count("a12"));
  CHECK_FALSE(s.count("b12"));
  CHECK(s.count("a10"));
  CHECK(s.count("b16"));
}
