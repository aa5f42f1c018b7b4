#include "semprobe/clustering.hpp"

#include "semprobe/error.hpp"

namespace semprobe {

std::vector<std::size_t> SemanticClustering::cluster_sizes() const {
  std::vector<std::size_t> sizes;
  sizes.reserve(clusters.size());
  for (const auto& c : clusters) sizes.push_back(c.size());
  return sizes;
}

bool SemanticClustering::is_partition_of(std::size_t n) const {
  std::vector<bool> seen(n, false);
  std::size_t count = 0;
  for (const auto& c : clusters) {
    if (c.empty()) return false;
    for (auto i : c) {
      if (i >= n || seen[i]) return false;
      seen[i] = true;
      ++count;
    }
  }
  return count == n;
}

SemanticClustering cluster_generations(const std::vector<std::string>& samples,
                                       const EntailmentBackend& backend,
                                       const ClusterOptions& options) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "cannot cluster zero samples");

  std::vector<std::string> texts;
  texts.reserve(samples.size());
  for (const auto& s : samples)
    texts.push_back(options.question_prefix.empty() ? s : options.question_prefix + " " + s);

  SemanticClustering out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    bool placed = false;
    for (auto& cluster : out.clusters) {
      bool match = false;
      if (options.compare_all_members) {
        match = true;
        for (auto member : cluster)
          if (!bidirectional_equivalent(texts[i], texts[member], backend)) {
            match = false;
            break;
          }
      } else {
        match = bidirectional_equivalent(texts[i], texts[cluster.front()], backend);
      }
      if (match) {
        cluster.push_back(i);
        placed = true;
        break;
      }
    }
    if (!placed) out.clusters.push_back({i});
  }
  return out;
}

void to_json(json& j, const SemanticClustering& c) { j = c.clusters; }

void from_json(const json& j, SemanticClustering& c) {
  c.clusters = j.get<std::vector<std::vector<std::size_t>>>();
}

std::vector<ClusterRecord> read_clusters_jsonl(const std::filesystem::path& path) {
  std::vector<ClusterRecord> rows;
  for_each_jsonl(path, [&](const json& obj, std::size_t) {
    rows.push_back({obj.at("id").get<std::string>(), obj.at("clusters").get<SemanticClustering>()});
  });
  return rows;
}

void write_clusters_jsonl(const std::filesystem::path& path, const std::vector<ClusterRecord>& rows) {
  std::vector<json> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(json{{"id", r.id}, {"clusters", r.clustering}});
  write_jsonl(path, out);
}

}  // namespace semprobe
