#include <doctest.h>

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

#include "semprobe/cli.hpp"
#include "tempdir.hpp"

using namespace semprobe;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "semprobe");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string p(const std::filesystem::path& path) { return path.string(); }

}  // namespace

TEST_CASE("exit codes and usage") {
  auto r = cli({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("train-probe") != std::string::npos);

  r = cli({"binarize", "--bogus"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("--reports") != std::string::npos);

  r = cli({});
  CHECK(r.code == kExitUsage);

  r = cli({"binarize", "--reports", "/nonexistent/reports.jsonl", "--out", "/tmp/x.json"});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.find("IoError") != std::string::npos);

  testutil::TempDir dir;
  REQUIRE(cli({"synth", "--out-dir", p(dir.path()), "--n-prompts", "40"}).code == kExitOk);
  r = cli({"eval", "--protocol", "loo", "--tasks", p(dir / "synth/task.json"), "--out", p(dir / "r.csv")});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("≥ 2 tasks required") != std::string::npos);
}

TEST_CASE("synthetic end-to-end chain is reproducible") {
  testutil::TempDir dir;
  auto chain = [&](const std::filesystem::path& root) {
    const auto t = root / "synth";
    CHECK(cli({"synth", "--out-dir", p(root), "--n-prompts", "150", "--seed", "3"}).code == kExitOk);
    CHECK(cli({"cluster", "--gens", p(t / "generations.jsonl"), "--backend", "oracle", "--oracle", p(t / "oracle.json"),
               "--out", p(root / "clusters.jsonl")})
              .code == kExitOk);
    CHECK(cli({"score", "--gens", p(t / "generations.jsonl"), "--clusters", p(root / "clusters.jsonl"), "--out",
               p(root / "reports.jsonl")})
              .code == kExitOk);
    CHECK(cli({"binarize", "--reports", p(root / "reports.jsonl"), "--out", p(root / "split.json")}).code == kExitOk);
    const auto tp = cli({"train-probe", "--archive", p(t / "hidden.seph"), "--labels", "se", "--split",
                         p(root / "split.json"), "--out", p(root / "probe.json")});
    CHECK_MESSAGE(tp.code == kExitOk, tp.err);
    const auto ev = cli({"eval", "--protocol", "in-dist", "--tasks", p(t / "task.json"), "--out", p(root / "results.csv"),
                         "--quiet"});
    CHECK_MESSAGE(ev.code == kExitOk, ev.err);
    CHECK(cli({"report", "--results", p(root / "results.csv")}).code == kExitOk);
  };
  chain(dir / "a");
  chain(dir / "b");
  for (const char* f : {"clusters.jsonl", "reports.jsonl", "split.json", "probe.json", "results.csv", "synth/hidden.seph"})
    CHECK_MESSAGE(testutil::slurp(dir / "a" / f) == testutil::slurp(dir / "b" / f), f);

  CHECK(testutil::slurp(dir / "a/clusters.jsonl") == testutil::slurp(dir / "a/synth/clusters.jsonl"));
  const auto manifest = json::parse(testutil::slurp(dir / "a/probe.json.manifest.json"));
  CHECK(manifest["command"] == "train-probe");
}

TEST_CASE("toml config drives synth") {
  testutil::TempDir dir;
  testutil::spit(dir / "lab.toml",
                 "[lab]\nn_prompts = 30\nhidden_dim = 6\nn_layers = 2\n\n"
                 "[[tasks]]\ntask_name = \"one\"\nseed = 1\n\n[[tasks]]\ntask_name = \"two\"\nseed = 2\ncontext_effect = 0.5\n");
  const auto r = cli({"--config", p(dir / "lab.toml"), "synth", "--out-dir", p(dir / "out")});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(std::filesystem::exists(dir / "out/one/task.json"));
  CHECK(std::filesystem::exists(dir / "out/two/task.json"));
  CHECK(std::filesystem::exists(dir / "out/two-context/task.json"));
  const auto qa = testutil::slurp(dir / "out/one/qa.jsonl");
  CHECK(std::count(qa.begin(), qa.end(), '\n') == 30);

  testutil::spit(dir / "bad.toml", "[lab]\nn_promts = 3\n");
  CHECK(cli({"--config", p(dir / "bad.toml"), "synth", "--out-dir", p(dir / "bad")}).code == kExitRuntime);
}
