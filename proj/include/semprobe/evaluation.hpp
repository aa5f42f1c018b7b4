#pragma once

// Accuracy scoring, AUROC and the in-distribution / generalization protocols.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semprobe/binarization.hpp"
#include "semprobe/dataset_store.hpp"
#include "semprobe/probe.hpp"
#include "semprobe/uncertainty.hpp"

namespace semprobe {

class GatewayClient;

/// Token-level F1 after answer normalization, maximized over references.
double squad_f1(std::string_view prediction, std::span<const std::string> references);

enum class CorrectnessMethod { F1_THRESHOLD, LLM_JUDGE };

struct CorrectnessLabel {
  std::string id;
  bool correct = false;
  CorrectnessMethod method = CorrectnessMethod::F1_THRESHOLD;
  std::optional<double> f1;           // present iff method == F1_THRESHOLD
  std::optional<std::string> error;   // judge failure; the label is unusable
};

void to_json(json& j, const CorrectnessLabel& l);
void from_json(const json& j, CorrectnessLabel& l);
std::vector<CorrectnessLabel> read_labels_jsonl(const std::filesystem::path& path);
void write_labels_jsonl(const std::filesystem::path& path, std::span<const CorrectnessLabel> labels);

/// Short form: correct iff F1(greedy, answers) ≥ threshold.
std::vector<CorrectnessLabel> label_correctness_short(std::span<const QARecord> records,
                                                      std::span<const GenerationSet> gen_sets,
                                                      double f1_threshold = 0.5);

using CorrectnessJudge = std::function<bool(const QARecord&, std::string_view proposed)>;

/// Long form via an LLM judge. Judge failures are kept as labels carrying
/// `error` (and a warning), never dropped.
std::vector<CorrectnessLabel> label_correctness_long(std::span<const QARecord> records,
                                                     std::span<const GenerationSet> gen_sets,
                                                     const CorrectnessJudge& judge, int max_parallel = 1);

/// Mann-Whitney AUROC with half credit for ties, via average ranks.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> gold);

enum class Protocol { IN_DIST, HOLDOUT_TRAIN, SINGLE_TRAIN_LOO };
enum class GoldKind { BINARIZED_SE, CORRECTNESS };

std::string_view to_string(Protocol p);
std::string_view to_string(GoldKind g);
Protocol parse_protocol(std::string_view text);

struct EvalResult {
  std::string predictor;  // sep, acc_probe, se_mc, se_discrete, naive_entropy, neg_ll, p_true
  GoldKind gold = GoldKind::CORRECTNESS;
  Protocol protocol = Protocol::IN_DIST;
  std::vector<std::string> train_tasks;  // {"mean"} for leave-one-out summary rows
  std::string eval_task;
  double auroc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::optional<std::string> error;  // failed cell
};

/// Everything the protocols need about one task, row-aligned.
struct TaskData {
  std::string name;
  std::vector<std::string> ids;
  FeatureMatrix sep_features;
  FeatureMatrix acc_features;
  std::vector<double> se;  // raw semantic entropy used for SEP labels
  std::vector<std::uint8_t> correct;
  /// Baseline scores keyed by predictor tag; nullopt rows are skipped.
  std::map<std::string, std::vector<std::optional<double>>> baselines;

  void validate() const;
};

struct ProtocolConfig {
  Protocol protocol = Protocol::IN_DIST;
  bool run_sep = true;
  bool run_acc_probe = true;
  bool run_baselines = true;
  FitOptions fit;
  SplitMethod split = SplitMethod::BEST;
  /// Drop SEP training rows with SE strictly between these quantiles.
  std::optional<std::pair<double, double>> quantile_filter;
  bool per_task_filter = false;
  double in_dist_train_fraction = 0.8;
  std::uint64_t seed = 0;
};

enum class SeSource { DISCRETE, MC };

/// Row-aligned TaskData from per-query artifacts. Rows follow `labels`;
/// labels carrying an error are skipped with a warning.
TaskData make_task_data(std::string name, std::span<const UncertaintyReport> reports,
                        std::span<const CorrectnessLabel> labels, std::span<const HiddenStateRecord> hidden,
                        const FeatureSpec& sep_spec, const FeatureSpec& acc_spec,
                        SeSource se_source = SeSource::DISCRETE);

/// task.json: {name, reports, labels, archive} plus optional qa, generations
/// and clusters; relative paths resolve against the descriptor's directory.
struct TaskDescriptor {
  std::string name;
  std::filesystem::path reports;
  std::filesystem::path labels;
  std::filesystem::path archive;
  std::optional<std::filesystem::path> qa;
  std::optional<std::filesystem::path> generations;
  std::optional<std::filesystem::path> clusters;
};

TaskDescriptor read_task_descriptor(const std::filesystem::path& path);
void write_task_descriptor(const std::filesystem::path& path, const TaskDescriptor& d);
TaskData load_task_data(const TaskDescriptor& d, const FeatureSpec& sep_spec, const FeatureSpec& acc_spec,
                        SeSource se_source = SeSource::DISCRETE);

/// Hallucination gold is NOT correct. SEP scores rank by p(high SE) and
/// accuracy-probe scores by 1 − p(correct), both through the logit; p_true is
/// scored as 1 − p_true.
std::vector<EvalResult> run_protocol(const std::vector<TaskData>& tasks, const ProtocolConfig& config);

/// Deterministic permutation of [0, n) from a 64-bit seed.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

void write_results_csv(const std::filesystem::path& path, std::span<const EvalResult> results);
std::vector<EvalResult> read_results_csv(const std::filesystem::path& path);
void write_results_jsonl(const std::filesystem::path& path, std::span<const EvalResult> results);
void to_json(json& j, const EvalResult& r);

/// Plain-text comparison table: one row per (eval task, gold), one column per
/// predictor, for each protocol present.
std::string render_report(std::span<const EvalResult> results);

}  // namespace semprobe
