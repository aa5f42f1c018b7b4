#include "semprobe/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <CLI11.hpp>
#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "semprobe/binarization.hpp"
#include "semprobe/clustering.hpp"
#include "semprobe/dataset_store.hpp"
#include "semprobe/entailment.hpp"
#include "semprobe/error.hpp"
#include "semprobe/evaluation.hpp"
#include "semprobe/gateway.hpp"
#include "semprobe/kernels.hpp"
#include "semprobe/log.hpp"
#include "semprobe/probe.hpp"
#include "semprobe/synthetic_lab.hpp"
#include "semprobe/uncertainty.hpp"

#ifndef SEMPROBE_VERSION
#define SEMPROBE_VERSION "0.0.0"
#endif

namespace semprobe {

namespace fs = std::filesystem;

namespace {

// ---- config & manifests ----------------------------------------------------

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw Error(ErrorCode::IoError, "config file not found: " + path);
  const auto ext = fs::path(path).extension().string();
  try {
    if (ext == ".toml") {
      const auto table = toml::parse_file(path);
      std::ostringstream s;
      s << toml::json_formatter{table};
      return json::parse(s.str());
    }
    std::ifstream in(path, std::ios::binary);
    return json::parse(in);
  } catch (const toml::parse_error& e) {
    std::ostringstream s;
    s << path << ": " << e.description() << " (line " << e.source().begin.line << ")";
    throw Error(ErrorCode::BadConfig, s.str());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, path + ": " + e.what());
  }
}

json section(const json& config, const char* name) {
  if (!config.contains(name)) return json::object();
  const auto& s = config.at(name);
  if (!s.is_object()) throw Error(ErrorCode::BadConfig, std::string("config section '") + name + "' must be a table");
  return s;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::optional<std::uint64_t> seed;
  std::string started_at = utc_now();

  void write(const fs::path& path) const {
    json j{{"command", command},
           {"argv", argv},
           {"config", config},
           {"inputs", inputs},
           {"outputs", outputs},
           {"seed", seed ? json(*seed) : json(nullptr)},
           {"tool_version", SEMPROBE_VERSION},
           {"started_at", started_at},
           {"finished_at", utc_now()}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << j.dump(2) << '\n';
  }
};

fs::path manifest_path(const fs::path& output) { return output.string() + ".manifest.json"; }

// ---- shared option groups --------------------------------------------------

struct GatewayFlags {
  std::string base_url;
  std::string model;
  int max_parallel = 0;
  bool chat = false;

  void add(CLI::App* app) {
    app->add_option("--base-url", base_url, "Completion server base URL (overrides config)");
    app->add_option("--model", model, "Model name sent to the server (overrides config)");
    app->add_option("--max-parallel", max_parallel, "Concurrent requests (overrides config)")->check(CLI::PositiveNumber);
    app->add_flag("--chat", chat, "Use /v1/chat/completions");
  }

  GatewayConfig resolve(const json& config) const {
    GatewayConfig g = section(config, "gateway").get<GatewayConfig>();
    g.with_env_key();
    if (!base_url.empty()) g.base_url = base_url;
    if (!model.empty()) g.model_name = model;
    if (max_parallel > 0) g.max_parallel_requests = max_parallel;
    if (chat) g.chat = true;
    g.validate();
    return g;
  }
};

std::pair<double, double> parse_quantile_pair(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw Error(ErrorCode::Usage, "--filter-quantiles expects lo,hi");
  try {
    std::size_t used = 0;
    const double lo = std::stod(text.substr(0, comma), &used);
    const double hi = std::stod(text.substr(comma + 1));
    return {lo, hi};
  } catch (const std::exception&) {
    throw Error(ErrorCode::Usage, "--filter-quantiles expects two numbers, got '" + text + "'");
  }
}

SeSource parse_se_source(const std::string& s) {
  if (s == "discrete") return SeSource::DISCRETE;
  if (s == "mc") return SeSource::MC;
  throw Error(ErrorCode::Usage, "--se expects discrete or mc");
}

SplitMethod parse_split_method(const std::string& s) {
  if (s == "best") return SplitMethod::BEST;
  if (s == "even") return SplitMethod::EVEN;
  throw Error(ErrorCode::Usage, "--method expects best or even");
}

ArchiveManifest peek_manifest(const fs::path& archive) {
  ArchiveFilter none;
  none.layers = std::vector<int>{};
  return read_hidden_archive(archive, none).first;
}

FeatureSpec make_spec(const std::string& position, const std::string& stream, const std::string& layers,
                      const ArchiveManifest& manifest) {
  FeatureSpec spec;
  spec.position = parse_position(position);
  spec.stream = parse_stream(stream);
  spec.hidden_dim = manifest.hidden_dim;
  if (layers.empty() || layers == "all") {
    for (std::uint32_t l = 0; l < manifest.n_layers; ++l) spec.layers.push_back(static_cast<int>(l));
  } else {
    spec.layers = parse_layer_list(layers);
  }
  spec.validate(manifest.n_layers);
  return spec;
}

json spec_json(const FeatureSpec& s) {
  return json{{"position", to_string(s.position)},
              {"stream", to_string(s.stream)},
              {"layers", s.layers},
              {"hidden_dim", s.hidden_dim}};
}

template <typename T>
std::unordered_map<std::string, const T*> by_id(const std::vector<T>& rows) {
  std::unordered_map<std::string, const T*> out;
  for (const auto& r : rows) out[r.id] = &r;
  return out;
}

// Demonstrations for the short-form template: the first five records of a
// QA file with their first reference answer.
std::vector<FewShotExample> few_shot_from(const std::vector<QARecord>& records) {
  if (records.size() < kShortFormDemos)
    throw Error(ErrorCode::MissingSlot, "short-form sampling needs at least 5 QA records for demonstrations");
  std::vector<FewShotExample> out;
  for (std::size_t i = 0; i < kShortFormDemos; ++i) out.push_back({records[i].question, records[i].answers.front()});
  return out;
}

// ---- commands --------------------------------------------------------------

struct Context {
  std::vector<std::string> argv;
  std::string config_path;
  std::ostream& out;
  std::ostream& err;

  RunManifest manifest(const std::string& command) const {
    RunManifest m;
    m.command = command;
    m.argv = argv;
    if (!config_path.empty()) m.inputs["config"] = config_path;
    return m;
  }
};

struct SampleCmd {
  std::string qa, out, template_kind = "short", few_shot;
  DecodeConfig decode;
  GatewayFlags gateway;

  void add(CLI::App* app) {
    app->add_option("--qa", qa, "QA records (JSONL)")->required();
    app->add_option("--template", template_kind, "Prompt template")->check(CLI::IsMember({"short", "long", "context"}));
    app->add_option("--out", out, "Generation sets (JSONL)")->required();
    app->add_option("--few-shot", few_shot,
                    "QA file whose first 5 records are the short-form demonstrations "
                    "(default: the first 5 records of --qa, which are then not sampled)");
    app->add_option("--n-samples", decode.n_samples, "Samples per question")->check(CLI::NonNegativeNumber);
    app->add_option("--temperature", decode.temperature, "Sampling temperature");
    app->add_option("--top-p", decode.top_p, "Nucleus sampling mass");
    app->add_option("--top-k", decode.top_k, "Top-k cutoff");
    gateway.add(app);
  }

  int run(const Context& ctx, const json& config) const {
    auto m = ctx.manifest("sample");
    auto records = read_qa_jsonl(qa);
    PromptTemplate tmpl;
    tmpl.kind = template_kind == "short" ? TemplateKind::SHORT_FORM
                : template_kind == "long" ? TemplateKind::LONG_FORM
                                          : TemplateKind::CONTEXT;
    if (tmpl.kind == TemplateKind::SHORT_FORM) {
      if (!few_shot.empty()) {
        tmpl.few_shot = few_shot_from(read_qa_jsonl(few_shot));
      } else {
        tmpl.few_shot = few_shot_from(records);
        records.erase(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(kShortFormDemos));
        warn("using the first 5 QA records as demonstrations; they are not sampled");
      }
    }
    const auto gw = gateway.resolve(config);
    GatewayClient client(gw);
    const auto sets = client.sample_many(records, tmpl, decode);
    write_generations_jsonl(out, sets);
    ctx.out << "wrote " << sets.size() << " generation sets to " << out << '\n';

    m.config = json{{"template", template_kind}, {"decode", decode}, {"gateway", gw}};
    m.inputs["qa"] = qa;
    if (!few_shot.empty()) m.inputs["few_shot"] = few_shot;
    m.outputs["generations"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct ClusterCmd {
  std::string gens, out, backend = "lexical", oracle, cache, qa, nli_path = "/nli";
  bool all_members = false, with_question = false;
  double flip_rate = 0.0;
  GatewayFlags gateway;

  void add(CLI::App* app) {
    app->add_option("--gens", gens, "Generation sets (JSONL)")->required();
    app->add_option("--backend", backend, "Entailment backend")
        ->check(CLI::IsMember({"lexical", "nli", "judge", "oracle"}));
    app->add_option("--out", out, "Clusterings (JSONL)")->required();
    app->add_option("--oracle", oracle, "Text-to-meaning map (JSON) for --backend oracle");
    app->add_option("--flip-rate", flip_rate, "Oracle label-flip rate")->check(CLI::Range(0.0, 1.0));
    app->add_option("--cache", cache, "Entailment judgment cache (JSONL journal)");
    app->add_option("--nli-path", nli_path, "Endpoint path of the NLI service");
    app->add_flag("--all-members", all_members, "Compare against every cluster member, not just the first");
    app->add_option("--qa", qa, "QA records, needed by --with-question");
    app->add_flag("--with-question", with_question, "Prefix each answer with its question before judging");
    gateway.add(app);
  }

  int run(const Context& ctx, const json& config) const {
    auto m = ctx.manifest("cluster");
    const auto sets = read_generations_jsonl(gens);
    std::unordered_map<std::string, std::string> questions;
    if (with_question) {
      if (qa.empty()) throw Error(ErrorCode::Usage, "--with-question needs --qa");
      for (const auto& r : read_qa_jsonl(qa)) questions[r.id] = r.question;
    }

    std::shared_ptr<const EntailmentBackend> inner;
    int parallel = 1;
    json backend_config{{"backend", backend}};
    if (backend == "lexical") {
      inner = std::make_shared<LexicalBackend>();
    } else if (backend == "oracle") {
      if (oracle.empty()) throw Error(ErrorCode::Usage, "--backend oracle needs --oracle <map.json>");
      std::ifstream in(oracle, std::ios::binary);
      if (!in) throw Error(ErrorCode::IoError, "cannot read " + oracle);
      std::unordered_map<std::string, std::string> map;
      try {
        map = json::parse(in).get<std::unordered_map<std::string, std::string>>();
      } catch (const json::exception& e) {
        throw Error(ErrorCode::ParseError, oracle + ": " + e.what());
      }
      inner = std::make_shared<MeaningOracleBackend>(std::move(map), flip_rate);
      m.inputs["oracle"] = oracle;
      backend_config["flip_rate"] = flip_rate;
    } else {
      const auto gw = gateway.resolve(config);
      parallel = gw.max_parallel_requests;
      backend_config["gateway"] = gw;
      if (backend == "nli") {
        inner = std::make_shared<NliHttpBackend>(gw, nli_path);
        backend_config["nli_path"] = nli_path;
      } else {
        inner = std::make_shared<LlmJudgeBackend>(std::make_shared<GatewayClient>(gw));
      }
    }
    std::shared_ptr<const EntailmentBackend> effective = inner;
    if (!cache.empty()) {
      effective = std::make_shared<CachedBackend>(inner, std::make_shared<EntailmentCache>(cache));
      m.inputs["cache"] = cache;
    }

    std::vector<ClusterRecord> rows(sets.size());
    run_bounded(sets.size(), parallel, [&](std::size_t i) {
      ClusterOptions opts;
      opts.compare_all_members = all_members;
      if (with_question) {
        const auto it = questions.find(sets[i].id);
        if (it == questions.end())
          throw Error(ErrorCode::MissingRecord, "no QA record for generation set '" + sets[i].id + "'");
        opts.question_prefix = it->second + " ";
      }
      std::vector<std::string> texts;
      for (const auto& s : sets[i].samples) texts.push_back(s.text);
      rows[i] = {sets[i].id, cluster_generations(texts, *effective, opts)};
    });
    write_clusters_jsonl(out, rows);
    ctx.out << "wrote " << rows.size() << " clusterings to " << out << '\n';

    backend_config["all_members"] = all_members;
    backend_config["with_question"] = with_question;
    m.config = backend_config;
    m.inputs["generations"] = gens;
    if (!qa.empty()) m.inputs["qa"] = qa;
    m.outputs["clusters"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct ScoreCmd {
  std::string gens, clusters, out, ptrue;

  void add(CLI::App* app) {
    app->add_option("--gens", gens, "Generation sets (JSONL)")->required();
    app->add_option("--clusters", clusters, "Clusterings (JSONL)")->required();
    app->add_option("--ptrue", ptrue, "p(True) scores (JSONL from `ptrue`) to merge into the reports");
    app->add_option("--out", out, "Uncertainty reports (JSONL)")->required();
  }

  int run(const Context& ctx, const json&) const {
    auto m = ctx.manifest("score");
    const auto sets = read_generations_jsonl(gens);
    const auto cluster_rows = read_clusters_jsonl(clusters);
    std::unordered_map<std::string, const ClusterRecord*> cl;
    for (const auto& c : cluster_rows) cl[c.id] = &c;
    std::unordered_map<std::string, double> pt;
    if (!ptrue.empty()) {
      for_each_jsonl(ptrue, [&](const json& row, std::size_t line) {
        try {
          pt[row.at("id").get<std::string>()] = row.at("p_true").get<double>();
        } catch (const json::exception& e) {
          throw Error(ErrorCode::ParseError, ptrue + ":" + std::to_string(line) + ": " + e.what());
        }
      });
      m.inputs["ptrue"] = ptrue;
    }
    std::vector<SemanticClustering> clusterings;
    std::vector<std::optional<double>> p_true;
    for (const auto& s : sets) {
      const auto it = cl.find(s.id);
      if (it == cl.end()) throw Error(ErrorCode::MissingRecord, "no clustering for '" + s.id + "'");
      clusterings.push_back(it->second->clustering);
      const auto p = pt.find(s.id);
      p_true.push_back(p == pt.end() ? std::nullopt : std::optional<double>(p->second));
    }
    const auto reports = kernels::score_queries(sets, clusterings, p_true);
    write_reports_jsonl(out, reports);
    ctx.out << "wrote " << reports.size() << " reports to " << out << '\n';

    m.inputs["generations"] = gens;
    m.inputs["clusters"] = clusters;
    m.outputs["reports"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct PTrueCmd {
  std::string gens, qa, out;
  double f1_threshold = 0.5;
  GatewayFlags gateway;

  void add(CLI::App* app) {
    app->add_option("--gens", gens, "Generation sets (JSONL)")->required();
    app->add_option("--qa", qa, "QA records (JSONL)")->required();
    app->add_option("--out", out, "p(True) scores (JSONL of {id, p_true})")->required();
    app->add_option("--f1-threshold", f1_threshold, "Correctness cutoff for the demonstration verdicts");
    gateway.add(app);
  }

  int run(const Context& ctx, const json& config) const {
    auto m = ctx.manifest("ptrue");
    const auto records = read_qa_jsonl(qa);
    const auto sets = read_generations_jsonl(gens);
    const auto set_of = by_id(sets);

    std::vector<PTrueBlock> blocks;
    std::unordered_set<std::string> demo_ids;
    for (const auto& r : records) {
      if (blocks.size() == kPTrueBlocks) break;
      const auto it = set_of.find(r.id);
      if (it == set_of.end()) continue;
      PTrueBlock b;
      b.question = r.question;
      for (const auto& s : it->second->samples) b.brainstormed.push_back(s.text);
      b.possible_answer = it->second->greedy.text;
      b.is_true = squad_f1(b.possible_answer, r.answers) >= f1_threshold;
      blocks.push_back(std::move(b));
      demo_ids.insert(r.id);
    }
    if (blocks.size() < kPTrueBlocks)
      throw Error(ErrorCode::MissingSlot, "p(True) needs 10 records with generations for its demonstrations");

    std::vector<const QARecord*> todo;
    for (const auto& r : records)
      if (!demo_ids.count(r.id) && set_of.count(r.id)) todo.push_back(&r);

    const auto gw = gateway.resolve(config);
    GatewayClient client(gw);
    std::vector<double> scores(todo.size());
    run_bounded(todo.size(), gw.max_parallel_requests, [&](std::size_t i) {
      scores[i] = client.p_true_score(*todo[i], *set_of.at(todo[i]->id), blocks);
    });
    std::vector<json> rows;
    for (std::size_t i = 0; i < todo.size(); ++i) rows.push_back(json{{"id", todo[i]->id}, {"p_true", scores[i]}});
    write_jsonl(out, rows);
    ctx.out << "wrote " << rows.size() << " p(True) scores to " << out << " (10 records used as demonstrations)\n";

    m.config = json{{"gateway", gw}, {"f1_threshold", f1_threshold}, {"demonstration_ids", std::vector<std::string>(demo_ids.begin(), demo_ids.end())}};
    std::sort(m.config["demonstration_ids"].begin(), m.config["demonstration_ids"].end());
    m.inputs["qa"] = qa;
    m.inputs["generations"] = gens;
    m.outputs["ptrue"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct LabelCmd {
  std::string qa, gens, out, mode = "short";
  double f1_threshold = 0.5;
  GatewayFlags gateway;

  void add(CLI::App* app) {
    app->add_option("--qa", qa, "QA records (JSONL)")->required();
    app->add_option("--gens", gens, "Generation sets (JSONL)")->required();
    app->add_option("--mode", mode, "short: SQuAD F1 threshold; long: LLM judge")
        ->check(CLI::IsMember({"short", "long"}));
    app->add_option("--f1-threshold", f1_threshold, "Short-form correctness cutoff");
    app->add_option("--out", out, "Correctness labels (JSONL)")->required();
    gateway.add(app);
  }

  int run(const Context& ctx, const json& config) const {
    auto m = ctx.manifest("label");
    const auto records = read_qa_jsonl(qa);
    const auto sets = read_generations_jsonl(gens);
    std::vector<CorrectnessLabel> labels;
    json cfg{{"mode", mode}};
    if (mode == "short") {
      labels = label_correctness_short(records, sets, f1_threshold);
      cfg["f1_threshold"] = f1_threshold;
    } else {
      const auto gw = gateway.resolve(config);
      auto client = std::make_shared<GatewayClient>(gw);
      labels = label_correctness_long(
          records, sets, [&](const QARecord& r, std::string_view p) { return client->judge_correctness(r, p); },
          gw.max_parallel_requests);
      cfg["gateway"] = gw;
    }
    write_labels_jsonl(out, labels);
    const auto failed = std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.error.has_value(); });
    ctx.out << "wrote " << labels.size() << " labels to " << out;
    if (failed) ctx.out << " (" << failed << " judge failures recorded)";
    ctx.out << '\n';

    m.config = cfg;
    m.inputs["qa"] = qa;
    m.inputs["generations"] = gens;
    m.outputs["labels"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct BinarizeCmd {
  std::string reports, method = "best", filter, se = "discrete", out;
  std::vector<std::string> groups;

  void add(CLI::App* app) {
    app->add_option("--reports", reports, "Uncertainty reports (JSONL)")->required();
    app->add_option("--method", method, "Threshold rule")->check(CLI::IsMember({"best", "even"}));
    app->add_option("--filter-quantiles", filter, "Drop SE values strictly between these quantiles, e.g. 0.55,0.80");
    app->add_option("--se", se, "Which SE estimate to binarize")->check(CLI::IsMember({"discrete", "mc"}));
    app->add_option("--out", out, "Split (JSON)")->required();
  }

  int run(const Context& ctx, const json&) const {
    auto m = ctx.manifest("binarize");
    const auto rows = read_reports_jsonl(reports);
    const auto source = parse_se_source(se);
    std::vector<std::pair<std::string, double>> values;
    for (const auto& r : rows) {
      if (source == SeSource::MC) {
        if (!r.semantic_entropy_mc) throw Error(ErrorCode::NoLogProbs, "report '" + r.id + "' has no Monte-Carlo SE");
        values.emplace_back(r.id, *r.semantic_entropy_mc);
      } else {
        values.emplace_back(r.id, r.semantic_entropy_discrete);
      }
    }
    json cfg{{"method", method}, {"se", se}};
    std::size_t dropped = 0;
    if (!filter.empty()) {
      const auto [lo, hi] = parse_quantile_pair(filter);
      const auto kept = filter_quantile_band(values, lo, hi);
      const std::unordered_set<std::string> keep(kept.begin(), kept.end());
      std::vector<std::pair<std::string, double>> filtered;
      for (auto& v : values)
        if (keep.count(v.first)) filtered.push_back(std::move(v));
      dropped = values.size() - filtered.size();
      values = std::move(filtered);
      cfg["filter_quantiles"] = {lo, hi};
    }
    const auto split = parse_split_method(method) == SplitMethod::BEST ? best_split(values) : even_split(values);
    json j = split;
    j["se_source"] = se;
    j["filtered_out"] = dropped;
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream f(out, std::ios::binary);
    if (!f) throw Error(ErrorCode::IoError, "cannot write " + out);
    f << j.dump(2) << '\n';
    ctx.out << "gamma* = " << split.gamma_star << " (" << split.n_low << " low, " << split.n_high << " high";
    if (dropped) ctx.out << ", " << dropped << " filtered out";
    ctx.out << ")\n";

    m.config = cfg;
    m.inputs["reports"] = reports;
    m.outputs["split"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct TrainProbeCmd {
  std::string archive, target, split, correctness, position = "slt", stream = "hidden", layers, out, task;
  FitOptions fit;
  bool no_standardize = false;

  void add(CLI::App* app) {
    app->add_option("--archive", archive, "Hidden-state archive")->required();
    app->add_option("--labels", target, "Probe target: se (needs --split) or acc (needs --correctness)")
        ->required()
        ->check(CLI::IsMember({"se", "acc", "accuracy"}));
    app->add_option("--split", split, "Split from `binarize` (SE labels)");
    app->add_option("--correctness", correctness, "Correctness labels (JSONL)");
    app->add_option("--position", position, "Token position")->check(CLI::IsMember({"slt", "tbg", "SLT", "TBG"}));
    app->add_option("--stream", stream, "Activation stream")->check(CLI::IsMember({"hidden", "residual", "mlp"}));
    app->add_option("--layers", layers, "Layers to concatenate, e.g. 28..32 or 1,4..6 (default: all)");
    app->add_option("--c", fit.c, "Inverse L2 strength")->check(CLI::PositiveNumber);
    app->add_flag("--no-standardize", no_standardize, "Fit on raw features");
    app->add_option("--max-iter", fit.max_iterations, "L-BFGS iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--seed", fit.seed, "Seed recorded with the probe");
    app->add_option("--task", task, "Task name recorded in the probe metadata");
    app->add_option("--out", out, "Probe (JSON)")->required();
  }

  int run(const Context& ctx, const json&) const {
    auto m = ctx.manifest("train-probe");
    const auto probe_target = parse_probe_target(target);
    const auto manifest = peek_manifest(archive);
    const auto spec = make_spec(position, stream, layers, manifest);

    std::vector<std::string> ids;
    std::vector<std::uint8_t> labels;
    std::optional<double> gamma;
    if (probe_target == ProbeTarget::SE) {
      if (split.empty()) throw Error(ErrorCode::Usage, "--labels se needs --split <split.json>");
      std::ifstream in(split, std::ios::binary);
      if (!in) throw Error(ErrorCode::IoError, "cannot read " + split);
      SplitResult s;
      try {
        s = json::parse(in).get<SplitResult>();
      } catch (const json::exception& e) {
        throw Error(ErrorCode::ParseError, split + ": " + e.what());
      }
      for (const auto& [id, l] : s.labels) {
        ids.push_back(id);
        labels.push_back(static_cast<std::uint8_t>(l));
      }
      gamma = s.gamma_star;
      m.inputs["split"] = split;
    } else {
      if (correctness.empty()) throw Error(ErrorCode::Usage, "--labels acc needs --correctness <labels.jsonl>");
      for (const auto& l : read_labels_jsonl(correctness)) {
        if (l.error) continue;
        ids.push_back(l.id);
        labels.push_back(l.correct ? 1 : 0);
      }
      m.inputs["correctness"] = correctness;
    }

    ArchiveFilter filter;
    filter.position = spec.position;
    filter.stream = spec.stream;
    filter.layers = spec.layers;
    const auto records = read_hidden_archive(archive, filter).second;
    TrainingSet ts;
    ts.features = assemble_features(records, spec, ids);
    ts.labels = std::move(labels);
    ts.ids = ids;
    auto opts = fit;
    opts.standardize = !no_standardize;
    auto model = fit_probe(ts, opts, probe_target, gamma);
    model.feature_spec = spec;
    if (!task.empty()) model.training_meta.tasks = {task};
    save_probe(model, out);
    ctx.out << "trained " << to_string(probe_target) << " probe on " << ts.ids.size() << " rows ("
            << model.training_meta.iterations << " iterations, "
            << (model.training_meta.converged ? "converged" : "not converged") << ")\n";

    m.config = json{{"target", to_string(probe_target)},
                    {"feature_spec", spec_json(spec)},
                    {"c", opts.c},
                    {"standardize", opts.standardize},
                    {"max_iterations", opts.max_iterations}};
    m.seed = opts.seed;
    m.inputs["archive"] = archive;
    m.outputs["probe"] = out;
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct EvalCmd {
  std::string protocol, out, jsonl, probes = "sep,acc", position = "slt", stream = "hidden", layers, acc_position,
                                    acc_layers, filter, split_method = "best", se = "discrete";
  std::vector<std::string> tasks;
  bool per_task_filter = false, no_baselines = false, quiet = false;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  void add(CLI::App* app) {
    app->add_option("--protocol", protocol, "in-dist, holdout or loo")
        ->required()
        ->check(CLI::IsMember({"in-dist", "holdout", "loo", "in_dist", "holdout_train", "single_train_loo"}));
    app->add_option("--tasks", tasks, "Task descriptors (task.json), comma separated")->required()->delimiter(',');
    app->add_option("--probes", probes, "Probes to train: sep, acc or sep,acc");
    app->add_option("--position", position, "SEP token position")->check(CLI::IsMember({"slt", "tbg", "SLT", "TBG"}));
    app->add_option("--stream", stream, "Activation stream")->check(CLI::IsMember({"hidden", "residual", "mlp"}));
    app->add_option("--layers", layers, "SEP layers (default: all)");
    app->add_option("--acc-position", acc_position, "Accuracy-probe position (default: --position)");
    app->add_option("--acc-layers", acc_layers, "Accuracy-probe layers (default: --layers)");
    app->add_option("--filter-quantiles", filter, "Quantile band dropped from SEP training, e.g. 0.55,0.80");
    app->add_flag("--per-task-filter", per_task_filter, "Apply the quantile band per training task");
    app->add_option("--split-method", split_method, "SE threshold rule")->check(CLI::IsMember({"best", "even"}));
    app->add_option("--se", se, "SE estimate used for SEP labels")->check(CLI::IsMember({"discrete", "mc"}));
    app->add_option("--seed", seed, "Seed for the in-distribution train/test split");
    app->add_option("--train-fraction", train_fraction, "In-distribution training share")
        ->check(CLI::Range(0.0, 1.0));
    app->add_flag("--no-baselines", no_baselines, "Skip the sampling-based baselines");
    app->add_option("--out", out, "Results (CSV)")->required();
    app->add_option("--jsonl", jsonl, "Results (JSONL; default: <out> with .jsonl)");
    app->add_flag("--quiet", quiet, "Do not print the report table");
  }

  int run(const Context& ctx, const json&) const {
    auto m = ctx.manifest("eval");
    ProtocolConfig cfg;
    cfg.protocol = parse_protocol(protocol);
    if (cfg.protocol != Protocol::IN_DIST && tasks.size() < 2)
      throw Error(ErrorCode::Usage, "≥ 2 tasks required for --protocol " + protocol);
    cfg.run_sep = probes.find("sep") != std::string::npos;
    cfg.run_acc_probe = probes.find("acc") != std::string::npos;
    cfg.run_baselines = !no_baselines;
    cfg.split = parse_split_method(split_method);
    if (!filter.empty()) cfg.quantile_filter = parse_quantile_pair(filter);
    cfg.per_task_filter = per_task_filter;
    cfg.seed = seed;
    cfg.in_dist_train_fraction = train_fraction;
    cfg.fit.seed = seed;

    std::vector<TaskData> data;
    json task_inputs = json::array();
    FeatureSpec sep_spec, acc_spec;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto d = read_task_descriptor(tasks[i]);
      const auto manifest = peek_manifest(d.archive);
      sep_spec = make_spec(position, stream, layers, manifest);
      acc_spec = make_spec(acc_position.empty() ? position : acc_position, stream,
                           acc_layers.empty() ? layers : acc_layers, manifest);
      data.push_back(load_task_data(d, sep_spec, acc_spec, parse_se_source(se)));
      task_inputs.push_back(tasks[i]);
    }
    const auto results = run_protocol(data, cfg);
    write_results_csv(out, results);
    const auto jsonl_path = jsonl.empty() ? fs::path(out).replace_extension(".jsonl") : fs::path(jsonl);
    write_results_jsonl(jsonl_path, results);
    if (!quiet) ctx.out << render_report(results);

    m.config = json{{"protocol", to_string(cfg.protocol)},
                    {"probes", probes},
                    {"sep_features", spec_json(sep_spec)},
                    {"acc_features", spec_json(acc_spec)},
                    {"split_method", split_method},
                    {"se", se},
                    {"filter_quantiles", cfg.quantile_filter ? json{cfg.quantile_filter->first, cfg.quantile_filter->second}
                                                             : json(nullptr)},
                    {"per_task_filter", per_task_filter},
                    {"train_fraction", train_fraction},
                    {"baselines", cfg.run_baselines}};
    m.seed = seed;
    m.inputs["tasks"] = task_inputs;
    m.outputs["csv"] = out;
    m.outputs["jsonl"] = jsonl_path.string();
    m.write(manifest_path(out));
    return kExitOk;
  }
};

struct SynthCmd {
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_prompts;

  void add(CLI::App* app) {
    app->add_option("--out-dir", out_dir, "Output directory (one sub-directory per task)")->required();
    app->add_option("--seed", seed, "Offset added to every task seed");
    app->add_option("--n-prompts", n_prompts, "Prompts per task (overrides config)")->check(CLI::PositiveNumber);
  }

  int run(const Context& ctx, const json& config) const {
    auto m = ctx.manifest("synth");
    const auto lab = section(config, "lab");
    std::vector<SyntheticTaskConfig> configs;
    auto base = lab.get<SyntheticTaskConfig>();
    if (config.contains("tasks")) {
      if (!config["tasks"].is_array()) throw Error(ErrorCode::BadConfig, "'tasks' must be an array of tables");
      for (const auto& overrides : config["tasks"]) {
        json merged = lab;
        for (const auto& [k, v] : overrides.items()) merged[k] = v;
        configs.push_back(merged.get<SyntheticTaskConfig>());
      }
    } else {
      configs.push_back(base);
    }
    for (const auto& [key, _] : config.items())
      if (key != "lab" && key != "tasks" && key != "gateway")
        throw Error(ErrorCode::BadConfig, "unknown config section '" + key + "'");

    json written = json::array();
    for (auto c : configs) {
      if (seed) c.seed += *seed;
      if (n_prompts) c.n_prompts = *n_prompts;
      const double effect = c.context_effect;
      c.context_effect = 0.0;
      const auto world = make_synthetic_task(c);
      const auto dir = fs::path(out_dir) / c.task_name;
      write_synthetic_task(world, dir);
      written.push_back((dir / "task.json").string());
      ctx.out << (dir / "task.json").string() << "  accuracy " << world.accuracy() << '\n';
      if (effect > 0.0) {
        auto with_context = apply_context(world, effect);
        with_context.config.task_name = c.task_name + "-context";
        const auto cdir = fs::path(out_dir) / with_context.config.task_name;
        write_synthetic_task(with_context, cdir);
        written.push_back((cdir / "task.json").string());
        ctx.out << (cdir / "task.json").string() << "  accuracy " << with_context.accuracy() << '\n';
      }
      c.context_effect = effect;
      m.config["tasks"].push_back(c);
    }
    m.seed = seed;
    m.outputs["tasks"] = written;
    m.write(fs::path(out_dir) / "manifest.json");
    return kExitOk;
  }
};

struct ReportCmd {
  std::string results;

  void add(CLI::App* app) { app->add_option("--results", results, "Results (CSV from `eval`)")->required(); }

  int run(const Context& ctx, const json&) const {
    ctx.out << render_report(read_results_csv(results));
    return kExitOk;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"semprobe: semantic entropy and semantic entropy probes"};
  app.name(args.empty() ? "semprobe" : fs::path(args.front()).filename().string());
  app.set_version_flag("--version", SEMPROBE_VERSION);
  app.require_subcommand(1);

  std::string config_path;
  int threads = 0;
  app.add_option("--config", config_path, "TOML or JSON config file (sections: gateway, lab, tasks)");
  app.add_option("--threads", threads, "OpenMP threads for the data-parallel kernels")->check(CLI::NonNegativeNumber);

  SampleCmd sample;
  ClusterCmd cluster;
  ScoreCmd score;
  PTrueCmd ptrue;
  LabelCmd label;
  BinarizeCmd binarize;
  TrainProbeCmd train;
  EvalCmd eval;
  SynthCmd synth;
  ReportCmd report;

  struct Entry {
    CLI::App* app;
    std::function<int(const Context&, const json&)> run;
  };
  std::vector<Entry> entries;
  auto reg = [&](auto& cmd, const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    cmd.add(sub);
    entries.push_back({sub, [&cmd](const Context& c, const json& j) { return cmd.run(c, j); }});
  };
  reg(sample, "sample", "Sample greedy and stochastic answers through the completion gateway");
  reg(cluster, "cluster", "Group sampled answers by bidirectional entailment");
  reg(score, "score", "Semantic entropy and baseline scores per question");
  reg(ptrue, "ptrue", "p(True) baseline through the completion gateway");
  reg(label, "label", "Correctness labels (SQuAD F1 or LLM judge)");
  reg(binarize, "binarize", "Binarize semantic entropy into high/low labels");
  reg(train, "train-probe", "Fit a linear probe on hidden states");
  reg(eval, "eval", "Run an evaluation protocol over task descriptors");
  reg(synth, "synth", "Generate synthetic tasks with planted hidden states");
  reg(report, "report", "Render an eval results CSV as a text table");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (const auto& e : entries)
      if (e.app->parsed()) target = e.app;
    out << target->help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << SEMPROBE_VERSION << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const CLI::App* target = &app;
    for (const auto& entry : entries)
      if (entry.app->parsed()) target = entry.app;
    err << "error: " << e.what() << "\n\n" << target->help();
    return kExitUsage;
  }

  std::ostringstream warnings;
  const auto previous = set_warning_sink([&err](std::string_view msg) { err << "warning: " << msg << '\n'; });
  int code = kExitRuntime;
  try {
    if (threads > 0) kernels::set_num_threads(threads);
    const auto config = load_config(config_path);
    Context ctx{args, config_path, out, err};
    for (const auto& e : entries)
      if (e.app->parsed()) code = e.run(ctx, config);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    code = e.code() == ErrorCode::Usage ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    code = kExitRuntime;
  }
  set_warning_sink(previous);
  return code;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace semprobe
