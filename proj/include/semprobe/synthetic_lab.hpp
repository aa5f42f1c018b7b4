#pragma once

// Synthetic ground-truth world: prompts with known meaning distributions,
// paraphrased samples, an exact entailment oracle and planted hidden states.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "semprobe/dataset_store.hpp"
#include "semprobe/entailment.hpp"
#include "semprobe/evaluation.hpp"

namespace semprobe {

struct SyntheticTaskConfig {
  std::string task_name = "synth";
  std::uint64_t seed = 0;
  /// Seeds the SE direction u, shared by every task built from the same world.
  std::uint64_t world_seed = 0;
  std::size_t n_prompts = 500;
  int n_meanings = 5;
  double dirichlet_alpha = 1.0;
  int paraphrases_per_meaning = 4;
  int n_samples = 10;
  std::uint32_t hidden_dim = 64;
  std::uint32_t n_layers = 4;
  double signal_weight = 1.0;
  double noise_sigma = 0.5;  // expected noise norm
  /// Weight of the task-specific correctness direction.
  double shortcut_weight = 0.0;
  /// Index of this task's shortcut direction in the world's orthonormal
  /// frame; tasks with different slots have orthogonal shortcuts.
  int shortcut_slot = 0;
  double context_effect = 0.0;
  /// Minimum share of samples agreeing with the greedy meaning for it to be
  /// the gold meaning; otherwise gold lies outside the model's support.
  double knowledge_threshold = 0.6;
  double label_flip_rate = 0.0;

  /// Throws BadConfig.
  void validate() const;
};

void to_json(json& j, const SyntheticTaskConfig& c);
/// Missing keys keep their defaults; unknown keys raise BadConfig.
void from_json(const json& j, SyntheticTaskConfig& c);

inline constexpr int kMaxParaphrases = 8;

struct SyntheticPrompt {
  std::vector<double> pi;   // over n_meanings + 1 meanings; the last is off-support
  int greedy_meaning = 0;
  int gold_meaning = 0;
  std::vector<int> sample_meanings;
  double gold_se = 0.0;
  bool correct = false;
};

struct SyntheticTask {
  SyntheticTaskConfig config;
  std::vector<QARecord> records;
  std::vector<GenerationSet> gen_sets;
  ArchiveManifest manifest;
  std::vector<HiddenStateRecord> hidden;
  std::unordered_map<std::string, std::string> meaning_of;  // text -> meaning key
  std::vector<SyntheticPrompt> prompts;

  std::vector<double> gold_se() const;
  std::vector<std::uint8_t> correct() const;
  double accuracy() const;
  std::shared_ptr<MeaningOracleBackend> oracle() const;
};

SyntheticTask make_synthetic_task(const SyntheticTaskConfig& config);

/// Moves each π toward its gold meaning, π' = (1 − e)π + e·δ_gold, then
/// regenerates samples and hidden states from the same random streams.
SyntheticTask apply_context(const SyntheticTask& world, double context_effect);

/// Writes qa.jsonl, generations.jsonl, hidden.seph, labels.jsonl, clusters.jsonl,
/// reports.jsonl, oracle.json and task.json into `dir`.
void write_synthetic_task(const SyntheticTask& task, const std::filesystem::path& dir);

/// Layer indices (all of them) and slot used by the planted signal.
FeatureSpec synthetic_feature_spec(const SyntheticTaskConfig& config, Position position = Position::SLT);

/// Protocol input for one synthetic task; baselines come from oracle clustering.
TaskData synthetic_task_data(const SyntheticTask& task, const FeatureSpec& spec);

}  // namespace semprobe
