#include "semprobe/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "semprobe/entailment.hpp"
#include "semprobe/error.hpp"
#include "semprobe/gateway.hpp"
#include "semprobe/log.hpp"
#include "semprobe/text.hpp"

namespace semprobe {

// ---- accuracy --------------------------------------------------------------

namespace {

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& ref) {
  if (pred.empty() || ref.empty()) return pred.empty() && ref.empty() ? 1.0 : 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t same = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double precision = static_cast<double>(same) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(same) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string_view to_string(CorrectnessMethod m) { return m == CorrectnessMethod::F1_THRESHOLD ? "f1" : "judge"; }

std::unordered_map<std::string, const GenerationSet*> index_by_id(std::span<const GenerationSet> gen_sets) {
  std::unordered_map<std::string, const GenerationSet*> out;
  for (const auto& g : gen_sets) out[g.id] = &g;
  return out;
}

const GenerationSet& find_greedy(const std::unordered_map<std::string, const GenerationSet*>& index,
                                 const std::string& id) {
  const auto it = index.find(id);
  if (it == index.end()) throw Error(ErrorCode::MissingGreedy, "no greedy generation for id '" + id + "'");
  return *it->second;
}

}  // namespace

double squad_f1(std::string_view prediction, std::span<const std::string> references) {
  const auto pred = normalized_tokens(prediction);
  double best = 0.0;
  for (const auto& r : references) best = std::max(best, f1_single(pred, normalized_tokens(r)));
  return best;
}

void to_json(json& j, const CorrectnessLabel& l) {
  j = json{{"id", l.id}, {"correct", l.correct}, {"method", to_string(l.method)}};
  j["f1"] = l.f1 ? json(*l.f1) : json(nullptr);
  if (l.error) j["error"] = *l.error;
}

void from_json(const json& j, CorrectnessLabel& l) {
  l.id = j.at("id").get<std::string>();
  l.correct = j.at("correct").get<bool>();
  const auto method = j.at("method").get<std::string>();
  if (method == "f1")
    l.method = CorrectnessMethod::F1_THRESHOLD;
  else if (method == "judge")
    l.method = CorrectnessMethod::LLM_JUDGE;
  else
    throw Error(ErrorCode::ParseError, "unknown correctness method '" + method + "'");
  l.f1.reset();
  if (j.contains("f1") && !j["f1"].is_null()) l.f1 = j["f1"].get<double>();
  if ((l.method == CorrectnessMethod::F1_THRESHOLD) != l.f1.has_value())
    throw Error(ErrorCode::ParseError, "label '" + l.id + "': f1 must be present iff method is f1");
  l.error.reset();
  if (j.contains("error") && !j["error"].is_null()) l.error = j["error"].get<std::string>();
}

std::vector<CorrectnessLabel> read_labels_jsonl(const std::filesystem::path& path) {
  std::vector<CorrectnessLabel> out;
  for_each_jsonl(path, [&](const json& row, std::size_t line) {
    try {
      out.push_back(row.get<CorrectnessLabel>());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line) + ": " + e.what());
    }
  });
  return out;
}

void write_labels_jsonl(const std::filesystem::path& path, std::span<const CorrectnessLabel> labels) {
  std::vector<json> rows(labels.begin(), labels.end());
  write_jsonl(path, rows);
}

std::vector<CorrectnessLabel> label_correctness_short(std::span<const QARecord> records,
                                                      std::span<const GenerationSet> gen_sets,
                                                      double f1_threshold) {
  const auto index = index_by_id(gen_sets);
  std::vector<CorrectnessLabel> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto& g = find_greedy(index, r.id);
    CorrectnessLabel l;
    l.id = r.id;
    l.method = CorrectnessMethod::F1_THRESHOLD;
    l.f1 = squad_f1(g.greedy.text, r.answers);
    l.correct = *l.f1 >= f1_threshold;
    out.push_back(std::move(l));
  }
  return out;
}

std::vector<CorrectnessLabel> label_correctness_long(std::span<const QARecord> records,
                                                     std::span<const GenerationSet> gen_sets,
                                                     const CorrectnessJudge& judge, int max_parallel) {
  const auto index = index_by_id(gen_sets);
  std::vector<const GenerationSet*> greedy(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) greedy[i] = &find_greedy(index, records[i].id);

  std::vector<CorrectnessLabel> out(records.size());
  run_bounded(records.size(), max_parallel, [&](std::size_t i) {
    auto& l = out[i];
    l.id = records[i].id;
    l.method = CorrectnessMethod::LLM_JUDGE;
    try {
      l.correct = judge(records[i], greedy[i]->greedy.text);
    } catch (const std::exception& e) {
      l.correct = false;
      l.error = e.what();
    }
  });
  for (const auto& l : out)
    if (l.error) warn("correctness judge failed for '" + l.id + "': " + *l.error);
  return out;
}

// ---- AUROC -----------------------------------------------------------------

double auroc(std::span<const double> scores, std::span<const std::uint8_t> gold) {
  if (scores.size() != gold.size())
    throw Error(ErrorCode::LengthMismatch, "scores and gold differ in length (" + std::to_string(scores.size()) +
                                               " vs " + std::to_string(gold.size()) + ")");
  for (double s : scores)
    if (std::isnan(s)) throw Error(ErrorCode::NonFiniteFeature, "AUROC score is NaN");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<std::size_t>(std::count_if(gold.begin(), gold.end(), [](auto g) { return g != 0; }));
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorCode::SingleClassGold, "AUROC needs both classes in gold");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the positive rank sum stays integral with averaged tie ranks.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t twice_rank = (i + 1) + (j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (gold[order[k]]) twice_rank_sum += twice_rank;
    i = j + 1;
  }
  const std::uint64_t twice_u = twice_rank_sum - static_cast<std::uint64_t>(n_pos) * (n_pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---- protocols -------------------------------------------------------------

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::IN_DIST: return "in_dist";
    case Protocol::HOLDOUT_TRAIN: return "holdout_train";
    case Protocol::SINGLE_TRAIN_LOO: return "single_train_loo";
  }
  return "?";
}

std::string_view to_string(GoldKind g) { return g == GoldKind::BINARIZED_SE ? "binarized_se" : "correctness"; }

Protocol parse_protocol(std::string_view text) {
  const auto t = to_lower(text);
  if (t == "in-dist" || t == "in_dist") return Protocol::IN_DIST;
  if (t == "holdout" || t == "holdout_train" || t == "holdout-train") return Protocol::HOLDOUT_TRAIN;
  if (t == "loo" || t == "single_train_loo" || t == "single-train-loo") return Protocol::SINGLE_TRAIN_LOO;
  throw Error(ErrorCode::ParseError, "unknown protocol '" + std::string(text) + "'");
}

namespace {

GoldKind parse_gold(std::string_view text) {
  if (text == "binarized_se") return GoldKind::BINARIZED_SE;
  if (text == "correctness") return GoldKind::CORRECTNESS;
  throw Error(ErrorCode::ParseError, "unknown gold kind '" + std::string(text) + "'");
}

}  // namespace

void TaskData::validate() const {
  if (name.empty() || name.find_first_of(",;\n") != std::string::npos)
    throw Error(ErrorCode::BadConfig, "task name '" + name + "' must be non-empty without ',', ';' or newlines");
  const std::size_t n = ids.size();
  auto check = [&](std::size_t got, const char* what) {
    if (got != n)
      throw Error(ErrorCode::LengthMismatch, "task '" + name + "': " + what + " has " + std::to_string(got) +
                                                 " rows, expected " + std::to_string(n));
  };
  check(sep_features.rows, "sep_features");
  check(acc_features.rows, "acc_features");
  check(se.size(), "se");
  check(correct.size(), "correct");
  for (const auto& [tag, v] : baselines) check(v.size(), tag.c_str());
  std::unordered_set<std::string> seen;
  for (const auto& id : ids)
    if (!seen.insert(id).second) throw Error(ErrorCode::DuplicateId, "task '" + name + "': duplicate id '" + id + "'");
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

namespace {

struct Slice {
  const TaskData* task;
  std::vector<std::size_t> rows;
};

Slice all_rows(const TaskData& t) {
  Slice s{&t, std::vector<std::size_t>(t.ids.size())};
  std::iota(s.rows.begin(), s.rows.end(), 0);
  return s;
}

std::string qualified(const TaskData& t, std::size_t row) { return t.name + '\x1f' + t.ids[row]; }

FeatureMatrix gather(std::span<const Slice> slices, FeatureMatrix TaskData::*which) {
  std::size_t rows = 0, cols = 0;
  for (const auto& s : slices) {
    rows += s.rows.size();
    cols = ((*s.task).*which).cols;
  }
  FeatureMatrix out(rows, cols);
  std::size_t r = 0;
  for (const auto& s : slices) {
    const auto& m = (*s.task).*which;
    if (m.cols != cols) throw Error(ErrorCode::DimMismatch, "tasks disagree on feature width");
    for (std::size_t i : s.rows) {
      const auto src = m.row(i);
      std::copy(src.begin(), src.end(), out.row(r++).begin());
    }
  }
  return out;
}

std::vector<std::string> gather_ids(std::span<const Slice> slices) {
  std::vector<std::string> out;
  for (const auto& s : slices)
    for (std::size_t i : s.rows) out.push_back(qualified(*s.task, i));
  return out;
}

void assert_disjoint(std::span<const Slice> train, const Slice& eval) {
  std::unordered_set<std::string> seen;
  for (const auto& s : train)
    for (std::size_t i : s.rows) seen.insert(qualified(*s.task, i));
  for (std::size_t i : eval.rows)
    if (seen.count(qualified(*eval.task, i)))
      throw Error(ErrorCode::BadPartition, "evaluation row '" + eval.task->ids[i] + "' of task '" + eval.task->name +
                                               "' appears in the training set");
}

bool high_se(double v, double gamma, SplitMethod method) { return method == SplitMethod::BEST ? v >= gamma : v > gamma; }

struct CellSpec {
  Protocol protocol;
  std::vector<Slice> train;
  Slice eval;
  std::vector<std::string> train_tasks;
};

EvalResult make_result(const CellSpec& cell, std::string predictor, GoldKind gold) {
  EvalResult r;
  r.predictor = std::move(predictor);
  r.gold = gold;
  r.protocol = cell.protocol;
  r.train_tasks = cell.train_tasks;
  r.eval_task = cell.eval.task->name;
  return r;
}

void score_into(EvalResult& r, std::span<const double> scores, std::span<const std::uint8_t> gold) {
  r.n_pos = static_cast<std::size_t>(std::count_if(gold.begin(), gold.end(), [](auto g) { return g != 0; }));
  r.n_neg = gold.size() - r.n_pos;
  r.auroc = auroc(scores, gold);
}

template <typename Fn>
void guarded(EvalResult& r, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    r.error = e.what();
    r.auroc = std::numeric_limits<double>::quiet_NaN();
  }
}

std::vector<std::uint8_t> hallucination_gold(const Slice& eval) {
  std::vector<std::uint8_t> gold;
  for (std::size_t i : eval.rows) gold.push_back(eval.task->correct[i] ? 0 : 1);
  return gold;
}

// SEP training rows after the optional quantile band filter.
std::vector<Slice> filter_sep_rows(std::span<const Slice> train, const ProtocolConfig& cfg) {
  if (!cfg.quantile_filter) return {train.begin(), train.end()};
  std::vector<std::pair<std::string, double>> values;
  std::vector<std::string> groups;
  for (const auto& s : train)
    for (std::size_t i : s.rows) {
      values.emplace_back(qualified(*s.task, i), s.task->se[i]);
      groups.push_back(s.task->name);
    }
  const auto [lo, hi] = *cfg.quantile_filter;
  const auto kept_ids = cfg.per_task_filter ? filter_quantile_band_grouped(values, groups, lo, hi)
                                            : filter_quantile_band(values, lo, hi);
  const std::unordered_set<std::string> kept(kept_ids.begin(), kept_ids.end());
  std::vector<Slice> out;
  for (const auto& s : train) {
    Slice f{s.task, {}};
    for (std::size_t i : s.rows)
      if (kept.count(qualified(*s.task, i))) f.rows.push_back(i);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<EvalResult> run_probe_cell(const CellSpec& cell, const ProtocolConfig& cfg) {
  std::vector<EvalResult> out;
  assert_disjoint(cell.train, cell.eval);
  const auto halluc = hallucination_gold(cell.eval);

  if (cfg.run_sep) {
    auto r_se = make_result(cell, "sep", GoldKind::BINARIZED_SE);
    auto r_acc = make_result(cell, "sep", GoldKind::CORRECTNESS);
    try {
      const auto rows = filter_sep_rows(cell.train, cfg);
      std::vector<std::pair<std::string, double>> values;
      for (const auto& s : rows)
        for (std::size_t i : s.rows) values.emplace_back(qualified(*s.task, i), s.task->se[i]);
      const auto split = cfg.split == SplitMethod::BEST ? best_split(values) : even_split(values);
      TrainingSet ts;
      ts.features = gather(rows, &TaskData::sep_features);
      ts.ids = gather_ids(rows);
      for (const auto& [id, label] : split.labels) ts.labels.push_back(static_cast<std::uint8_t>(label));
      const auto model = fit_probe(ts, cfg.fit, ProbeTarget::SE, split.gamma_star);
      const auto p = decision_function(model, gather(std::span(&cell.eval, 1), &TaskData::sep_features));

      std::vector<std::uint8_t> se_gold;
      for (std::size_t i : cell.eval.rows)
        se_gold.push_back(high_se(cell.eval.task->se[i], split.gamma_star, cfg.split) ? 1 : 0);
      guarded(r_se, [&] { score_into(r_se, p, se_gold); });
      guarded(r_acc, [&] { score_into(r_acc, p, halluc); });
    } catch (const std::exception& e) {
      for (auto* r : {&r_se, &r_acc}) {
        r->error = e.what();
        r->auroc = std::numeric_limits<double>::quiet_NaN();
      }
    }
    out.push_back(std::move(r_se));
    out.push_back(std::move(r_acc));
  }

  if (cfg.run_acc_probe) {
    auto r = make_result(cell, "acc_probe", GoldKind::CORRECTNESS);
    guarded(r, [&] {
      TrainingSet ts;
      ts.features = gather(cell.train, &TaskData::acc_features);
      ts.ids = gather_ids(cell.train);
      for (const auto& s : cell.train)
        for (std::size_t i : s.rows) ts.labels.push_back(s.task->correct[i] ? 1 : 0);
      const auto model = fit_probe(ts, cfg.fit, ProbeTarget::ACCURACY);
      auto p = decision_function(model, gather(std::span(&cell.eval, 1), &TaskData::acc_features));
      for (auto& v : p) v = -v;
      score_into(r, p, halluc);
    });
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EvalResult> run_baselines(Protocol protocol, const Slice& eval) {
  std::vector<EvalResult> out;
  for (const auto& [tag, values] : eval.task->baselines) {
    EvalResult r;
    r.predictor = tag;
    r.gold = GoldKind::CORRECTNESS;
    r.protocol = protocol;
    r.eval_task = eval.task->name;
    guarded(r, [&] {
      std::vector<double> scores;
      std::vector<std::uint8_t> gold;
      for (std::size_t i : eval.rows) {
        if (!values[i]) continue;
        scores.push_back(tag == "p_true" ? 1.0 - *values[i] : *values[i]);
        gold.push_back(eval.task->correct[i] ? 0 : 1);
      }
      score_into(r, scores, gold);
    });
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EvalResult> loo_means(const std::vector<EvalResult>& cells) {
  std::map<std::tuple<std::string, std::string, GoldKind>, std::vector<const EvalResult*>> groups;
  std::vector<std::tuple<std::string, std::string, GoldKind>> order;
  for (const auto& r : cells) {
    if (r.train_tasks.empty()) continue;
    auto key = std::make_tuple(r.eval_task, r.predictor, r.gold);
    auto& g = groups[key];
    if (g.empty()) order.push_back(key);
    g.push_back(&r);
  }
  std::vector<EvalResult> out;
  for (const auto& key : order) {
    const auto& members = groups[key];
    EvalResult m = *members.front();
    m.train_tasks = {"mean"};
    m.error.reset();
    double sum = 0.0;
    for (const auto* r : members) {
      if (r->error) {
        m.error = "leave-one-out cell trained on '" + r->train_tasks.front() + "' failed: " + *r->error;
        break;
      }
      sum += r->auroc;
    }
    m.auroc = m.error ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(members.size());
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

std::vector<EvalResult> run_protocol(const std::vector<TaskData>& tasks, const ProtocolConfig& config) {
  if (tasks.empty()) throw Error(ErrorCode::EmptyInput, "no tasks to evaluate");
  std::set<std::string> names;
  for (const auto& t : tasks) {
    t.validate();
    if (!names.insert(t.name).second) throw Error(ErrorCode::DuplicateId, "duplicate task name '" + t.name + "'");
  }
  if (config.protocol != Protocol::IN_DIST && tasks.size() < 2)
    throw Error(ErrorCode::Usage, "≥ 2 tasks required for the " + std::string(to_string(config.protocol)) + " protocol");
  if (!(config.in_dist_train_fraction > 0.0 && config.in_dist_train_fraction < 1.0))
    throw Error(ErrorCode::BadConfig, "in-distribution train fraction must lie in (0, 1)");

  std::vector<CellSpec> cells;
  std::vector<Slice> baseline_slices;
  for (std::size_t e = 0; e < tasks.size(); ++e) {
    const auto& task = tasks[e];
    switch (config.protocol) {
      case Protocol::IN_DIST: {
        const std::size_t n = task.ids.size();
        const auto perm = seeded_permutation(n, config.seed ^ fnv1a64(task.name));
        auto n_train = static_cast<std::size_t>(std::floor(config.in_dist_train_fraction * static_cast<double>(n)));
        n_train = std::clamp<std::size_t>(n_train, std::min<std::size_t>(1, n), n > 0 ? n - 1 : 0);
        Slice train{&task, {perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train)}};
        Slice eval{&task, {perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end()}};
        std::sort(train.rows.begin(), train.rows.end());
        std::sort(eval.rows.begin(), eval.rows.end());
        baseline_slices.push_back(eval);
        cells.push_back({Protocol::IN_DIST, {std::move(train)}, std::move(eval), {task.name}});
        break;
      }
      case Protocol::HOLDOUT_TRAIN: {
        CellSpec c{Protocol::HOLDOUT_TRAIN, {}, all_rows(task), {}};
        for (std::size_t t = 0; t < tasks.size(); ++t)
          if (t != e) {
            c.train.push_back(all_rows(tasks[t]));
            c.train_tasks.push_back(tasks[t].name);
          }
        baseline_slices.push_back(c.eval);
        cells.push_back(std::move(c));
        break;
      }
      case Protocol::SINGLE_TRAIN_LOO: {
        for (std::size_t t = 0; t < tasks.size(); ++t)
          if (t != e) cells.push_back({Protocol::SINGLE_TRAIN_LOO, {all_rows(tasks[t])}, all_rows(task), {tasks[t].name}});
        baseline_slices.push_back(all_rows(task));
        break;
      }
    }
  }

  std::vector<std::vector<EvalResult>> cell_results(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  const auto n_cells = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n_cells; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    try {
      cell_results[ui] = run_probe_cell(cells[ui], config);
    } catch (...) {
      errors[ui] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<EvalResult> out;
  for (auto& rs : cell_results)
    for (auto& r : rs) out.push_back(std::move(r));
  if (config.protocol == Protocol::SINGLE_TRAIN_LOO) {
    auto means = loo_means(out);
    out.insert(out.end(), std::make_move_iterator(means.begin()), std::make_move_iterator(means.end()));
  }
  if (config.run_baselines)
    for (const auto& s : baseline_slices) {
      auto rs = run_baselines(config.protocol, s);
      out.insert(out.end(), std::make_move_iterator(rs.begin()), std::make_move_iterator(rs.end()));
    }
  return out;
}

// ---- output ----------------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    out.emplace_back(text.substr(start, pos == std::string_view::npos ? text.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

constexpr const char* kCsvHeader = "predictor,protocol,train_tasks,eval_task,gold,auroc,n_pos,n_neg";

}  // namespace

void write_results_csv(const std::filesystem::path& path, std::span<const EvalResult> results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << kCsvHeader << '\n';
  for (const auto& r : results) {
    out << r.predictor << ',' << to_string(r.protocol) << ',' << join(r.train_tasks, ';') << ',' << r.eval_task << ','
        << to_string(r.gold) << ',' << (r.error ? std::string() : format_double(r.auroc)) << ',' << r.n_pos << ','
        << r.n_neg << '\n';
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

std::vector<EvalResult> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCsvHeader)
    throw Error(ErrorCode::ParseError, path.string() + ": missing results header");
  std::vector<EvalResult> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto f = split(line, ',');
    auto fail = [&](const std::string& why) {
      return Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (f.size() != 8) throw fail("expected 8 columns");
    EvalResult r;
    r.predictor = f[0];
    try {
      r.protocol = parse_protocol(f[1]);
      r.gold = parse_gold(f[4]);
    } catch (const Error& e) {
      throw fail(e.what());
    }
    if (!f[2].empty()) r.train_tasks = split(f[2], ';');
    r.eval_task = f[3];
    auto parse_num = [&](const std::string& s, auto& v) {
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || ptr != s.data() + s.size()) throw fail("bad number '" + s + "'");
    };
    if (f[5].empty()) {
      r.error = "failed cell";
      r.auroc = std::numeric_limits<double>::quiet_NaN();
    } else {
      parse_num(f[5], r.auroc);
    }
    parse_num(f[6], r.n_pos);
    parse_num(f[7], r.n_neg);
    out.push_back(std::move(r));
  }
  return out;
}

void to_json(json& j, const EvalResult& r) {
  j = json{{"predictor", r.predictor},       {"protocol", to_string(r.protocol)}, {"train_tasks", r.train_tasks},
           {"eval_task", r.eval_task},       {"gold", to_string(r.gold)},
           {"auroc", r.error ? json(nullptr) : json(r.auroc)},
           {"n_pos", r.n_pos},               {"n_neg", r.n_neg}};
  if (r.error) j["error"] = *r.error;
}

void write_results_jsonl(const std::filesystem::path& path, std::span<const EvalResult> results) {
  std::vector<json> rows(results.begin(), results.end());
  write_jsonl(path, rows);
}

std::string render_report(std::span<const EvalResult> results) {
  static const std::vector<std::string> kOrder = {"sep",           "acc_probe", "se_mc", "se_discrete",
                                                  "naive_entropy", "neg_ll",    "p_true"};
  std::ostringstream out;
  std::vector<Protocol> protocols;
  for (const auto& r : results)
    if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end()) protocols.push_back(r.protocol);

  for (const auto p : protocols) {
    std::vector<std::string> predictors;
    using RowKey = std::tuple<std::string, std::string, std::string>;  // eval task, train, gold
    std::vector<RowKey> rows;
    std::map<std::pair<RowKey, std::string>, const EvalResult*> cells;
    for (const auto& r : results) {
      if (r.protocol != p) continue;
      if (std::find(predictors.begin(), predictors.end(), r.predictor) == predictors.end())
        predictors.push_back(r.predictor);
      // Baselines do not depend on the training tasks; show them on every row.
      RowKey key{r.eval_task, join(r.train_tasks, '+'), std::string(to_string(r.gold))};
      if (!r.train_tasks.empty() && std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
      cells[{key, r.predictor}] = &r;
    }
    for (const auto& r : results) {
      if (r.protocol != p || !r.train_tasks.empty()) continue;
      bool placed = false;
      for (const auto& key : rows)
        if (std::get<0>(key) == r.eval_task && std::get<2>(key) == to_string(r.gold)) {
          cells[{key, r.predictor}] = &r;
          placed = true;
        }
      if (!placed) {
        RowKey key{r.eval_task, "-", std::string(to_string(r.gold))};
        if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
        cells[{key, r.predictor}] = &r;
      }
    }
    std::stable_sort(predictors.begin(), predictors.end(), [&](const auto& a, const auto& b) {
      auto rank = [&](const std::string& s) {
        const auto it = std::find(kOrder.begin(), kOrder.end(), s);
        return static_cast<std::size_t>(it - kOrder.begin());
      };
      return rank(a) < rank(b);
    });
    std::stable_sort(rows.begin(), rows.end(), [](const RowKey& a, const RowKey& b) {
      return std::tie(std::get<0>(a), std::get<2>(a)) < std::tie(std::get<0>(b), std::get<2>(b));
    });

    std::vector<std::vector<std::string>> table;
    table.push_back({"eval_task", "train", "gold"});
    for (const auto& pr : predictors) table.front().push_back(pr);
    for (const auto& key : rows) {
      std::vector<std::string> line{std::get<0>(key), std::get<1>(key), std::get<2>(key)};
      for (const auto& pr : predictors) {
        const auto it = cells.find({key, pr});
        if (it == cells.end()) {
          line.emplace_back("-");
        } else if (it->second->error) {
          line.emplace_back("failed");
        } else {
          std::ostringstream v;
          v << std::fixed << std::setprecision(3) << it->second->auroc;
          line.push_back(v.str());
        }
      }
      table.push_back(std::move(line));
    }
    std::vector<std::size_t> width(table.front().size(), 0);
    for (const auto& line : table)
      for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

    out << "protocol: " << to_string(p) << " (AUROC, gold positive = high SE or hallucination)\n";
    for (std::size_t r = 0; r < table.size(); ++r) {
      for (std::size_t c = 0; c < table[r].size(); ++c) {
        if (c) out << "  ";
        if (c < 3)
          out << std::left << std::setw(static_cast<int>(width[c])) << table[r][c];
        else
          out << std::right << std::setw(static_cast<int>(width[c])) << table[r][c];
      }
      out << '\n';
      if (r == 0) {
        std::size_t total = 0;
        for (auto w : width) total += w;
        out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
      }
    }
    out << '\n';
    for (const auto& r : results)
      if (r.protocol == p && r.error)
        out << "failed: " << r.predictor << " on " << r.eval_task << ": " << *r.error << '\n';
  }
  return out.str();
}

}  // namespace semprobe

namespace semprobe {

// ---- task assembly ---------------------------------------------------------

TaskData make_task_data(std::string name, std::span<const UncertaintyReport> reports,
                        std::span<const CorrectnessLabel> labels, std::span<const HiddenStateRecord> hidden,
                        const FeatureSpec& sep_spec, const FeatureSpec& acc_spec, SeSource se_source) {
  std::unordered_map<std::string, const UncertaintyReport*> by_id;
  for (const auto& r : reports) by_id[r.id] = &r;

  TaskData t;
  t.name = std::move(name);
  std::vector<const UncertaintyReport*> rows;
  std::size_t skipped = 0;
  for (const auto& l : labels) {
    if (l.error) {
      ++skipped;
      continue;
    }
    const auto it = by_id.find(l.id);
    if (it == by_id.end()) throw Error(ErrorCode::MissingRecord, "task '" + t.name + "': no report for '" + l.id + "'");
    t.ids.push_back(l.id);
    t.correct.push_back(l.correct ? 1 : 0);
    rows.push_back(it->second);
  }
  if (skipped)
    warn("task '" + t.name + "': skipped " + std::to_string(skipped) + " rows whose correctness label failed");

  static const char* kTags[] = {"se_mc", "se_discrete", "naive_entropy", "neg_ll", "p_true"};
  for (const char* tag : kTags) t.baselines[tag];
  for (const auto* r : rows) {
    if (se_source == SeSource::MC) {
      if (!r->semantic_entropy_mc)
        throw Error(ErrorCode::NoLogProbs, "task '" + t.name + "': '" + r->id + "' has no Monte-Carlo SE");
      t.se.push_back(*r->semantic_entropy_mc);
    } else {
      t.se.push_back(r->semantic_entropy_discrete);
    }
    t.baselines["se_mc"].push_back(r->semantic_entropy_mc);
    t.baselines["se_discrete"].push_back(r->semantic_entropy_discrete);
    t.baselines["naive_entropy"].push_back(r->naive_entropy);
    t.baselines["neg_ll"].push_back(r->neg_log_likelihood);
    t.baselines["p_true"].push_back(r->p_true);
  }
  for (auto it = t.baselines.begin(); it != t.baselines.end();) {
    const bool empty = std::none_of(it->second.begin(), it->second.end(), [](const auto& v) { return v.has_value(); });
    it = empty ? t.baselines.erase(it) : std::next(it);
  }

  t.sep_features = assemble_features(hidden, sep_spec, t.ids);
  t.acc_features = assemble_features(hidden, acc_spec, t.ids);
  return t;
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

TaskDescriptor read_task_descriptor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read task descriptor " + path.string());
  TaskDescriptor d;
  try {
    const auto j = json::parse(in);
    const auto base = path.parent_path();
    d.name = j.at("name").get<std::string>();
    d.reports = resolve(base, j.at("reports").get<std::string>());
    d.labels = resolve(base, j.at("labels").get<std::string>());
    d.archive = resolve(base, j.at("archive").get<std::string>());
    for (auto [key, slot] : {std::pair{"qa", &d.qa}, {"generations", &d.generations}, {"clusters", &d.clusters}})
      if (j.contains(key) && !j[key].is_null()) *slot = resolve(base, j[key].get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return d;
}

void write_task_descriptor(const std::filesystem::path& path, const TaskDescriptor& d) {
  const auto base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) { return p.lexically_relative(base.empty() ? "." : base).generic_string(); };
  json j{{"name", d.name}, {"reports", rel(d.reports)}, {"labels", rel(d.labels)}, {"archive", rel(d.archive)}};
  if (d.qa) j["qa"] = rel(*d.qa);
  if (d.generations) j["generations"] = rel(*d.generations);
  if (d.clusters) j["clusters"] = rel(*d.clusters);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

TaskData load_task_data(const TaskDescriptor& d, const FeatureSpec& sep_spec, const FeatureSpec& acc_spec,
                        SeSource se_source) {
  const auto reports = read_reports_jsonl(d.reports);
  const auto labels = read_labels_jsonl(d.labels);
  ArchiveFilter filter;
  auto [manifest, hidden] = read_hidden_archive(d.archive, filter);
  for (const auto* spec : {&sep_spec, &acc_spec}) {
    if (spec->hidden_dim != manifest.hidden_dim)
      throw Error(ErrorCode::DimMismatch, d.archive.string() + ": hidden_dim " + std::to_string(manifest.hidden_dim) +
                                              " but the probe expects " + std::to_string(spec->hidden_dim));
    spec->validate(manifest.n_layers);
  }
  return make_task_data(d.name, reports, labels, hidden, sep_spec, acc_spec, se_source);
}

}  // namespace semprobe
