#pragma once

// Per-query uncertainty scores. All entropies are in nats.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semprobe/clustering.hpp"
#include "semprobe/dataset_store.hpp"

namespace semprobe {

struct UncertaintyReport {
  std::string id;
  std::optional<double> semantic_entropy_mc;  // absent without token log-probs
  double semantic_entropy_discrete = 0.0;
  std::optional<double> naive_entropy;
  std::optional<double> neg_log_likelihood;
  std::optional<double> p_true;
  int n_clusters = 0;
  int n_samples = 0;
  SemanticClustering clusters;
};

void to_json(json& j, const UncertaintyReport& r);
void from_json(const json& j, UncertaintyReport& r);
std::vector<UncertaintyReport> read_reports_jsonl(const std::filesystem::path& path);
void write_reports_jsonl(const std::filesystem::path& path, std::span<const UncertaintyReport> reports);

/// Stable log(Σ exp(x)). Empty input or all -inf yields -inf.
double log_sum_exp(std::span<const double> xs);

/// Σ_i log p(t_i | ·). NoLogProbs when the sample carries none.
double sequence_log_prob(const GenerationSample& sample);

/// log p(C_k | x) per cluster from the member samples' sequence log-probs.
std::vector<double> cluster_log_probs(const GenerationSet& gen_set, const SemanticClustering& clustering);

/// −(1/K) Σ_k log p(C_k | x).
double semantic_entropy_mc(std::span<const double> cluster_log_probs);

/// Shannon entropy of the cluster-size fractions |C_k| / N.
double semantic_entropy_discrete(const SemanticClustering& clustering, std::size_t n);

/// −(1/N) Σ_n mean_i log p(t_{n,i}) over the sampled generations.
double naive_entropy(const GenerationSet& gen_set);

/// −mean_i log p(t_i) of the greedy answer.
double neg_log_likelihood(const GenerationSample& greedy);

bool has_log_probs(const GenerationSet& gen_set);

/// All scores for one query; MC SE and naive entropy are left empty when any
/// sample lacks log-probs, neg-LL when the greedy answer does.
UncertaintyReport score_query(const GenerationSet& gen_set, const SemanticClustering& clustering,
                              std::optional<double> p_true = std::nullopt);

}  // namespace semprobe
