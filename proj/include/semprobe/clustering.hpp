#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "semprobe/entailment.hpp"

namespace semprobe {

/// Clusters in creation order; member index lists ascending.
struct SemanticClustering {
  std::vector<std::vector<std::size_t>> clusters;

  std::size_t size() const { return clusters.size(); }
  std::vector<std::size_t> cluster_sizes() const;
  /// Disjoint, exhaustive over [0, n), no empty cluster.
  bool is_partition_of(std::size_t n) const;
};

struct ClusterOptions {
  /// Test a new sample against every member instead of the earliest one.
  bool compare_all_members = false;
  /// Prefix each answer with the question before judging.
  std::string question_prefix;
};

/// Greedy pass: each sample joins the first existing cluster whose
/// representative it is bidirectionally equivalent to, else opens a new one.
SemanticClustering cluster_generations(const std::vector<std::string>& samples,
                                       const EntailmentBackend& backend,
                                       const ClusterOptions& options = {});

void to_json(json& j, const SemanticClustering& c);
void from_json(const json& j, SemanticClustering& c);

/// One line per query: {"id": ..., "clusters": [[...], ...]}.
struct ClusterRecord {
  std::string id;
  SemanticClustering clustering;
};

std::vector<ClusterRecord> read_clusters_jsonl(const std::filesystem::path& path);
void write_clusters_jsonl(const std::filesystem::path& path, const std::vector<ClusterRecord>& rows);

}  // namespace semprobe
