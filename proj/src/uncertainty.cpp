#include "semprobe/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "semprobe/error.hpp"

namespace semprobe {

namespace {

template <typename T>
void put_optional(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
std::optional<T> get_optional(const json& j, const char* key) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) return it->get<T>();
  return std::nullopt;
}

}  // namespace

void to_json(json& j, const UncertaintyReport& r) {
  j = json{{"id", r.id}, {"semantic_entropy_discrete", r.semantic_entropy_discrete},
           {"n_clusters", r.n_clusters}, {"n_samples", r.n_samples}, {"clusters", r.clusters}};
  put_optional(j, "semantic_entropy_mc", r.semantic_entropy_mc);
  put_optional(j, "naive_entropy", r.naive_entropy);
  put_optional(j, "neg_log_likelihood", r.neg_log_likelihood);
  put_optional(j, "p_true", r.p_true);
}

void from_json(const json& j, UncertaintyReport& r) {
  r.id = j.at("id").get<std::string>();
  r.semantic_entropy_discrete = j.at("semantic_entropy_discrete").get<double>();
  r.n_clusters = j.at("n_clusters").get<int>();
  r.n_samples = j.at("n_samples").get<int>();
  r.semantic_entropy_mc = get_optional<double>(j, "semantic_entropy_mc");
  r.naive_entropy = get_optional<double>(j, "naive_entropy");
  r.neg_log_likelihood = get_optional<double>(j, "neg_log_likelihood");
  r.p_true = get_optional<double>(j, "p_true");
  if (auto it = j.find("clusters"); it != j.end()) r.clusters = it->get<SemanticClustering>();
  if (r.p_true && !(*r.p_true >= 0.0 && *r.p_true <= 1.0))
    throw Error(ErrorCode::ParseError, "report '" + r.id + "': p_true outside [0, 1]");
}

std::vector<UncertaintyReport> read_reports_jsonl(const std::filesystem::path& path) {
  std::vector<UncertaintyReport> out;
  for_each_jsonl(path, [&](const json& obj, std::size_t) { out.push_back(obj.get<UncertaintyReport>()); });
  return out;
}

void write_reports_jsonl(const std::filesystem::path& path, std::span<const UncertaintyReport> reports) {
  std::vector<json> rows(reports.begin(), reports.end());
  write_jsonl(path, rows);
}

double log_sum_exp(std::span<const double> xs) {
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  if (xs.empty()) return neg_inf;
  const double m = *std::max_element(xs.begin(), xs.end());
  if (m == neg_inf) return neg_inf;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

double sequence_log_prob(const GenerationSample& sample) {
  if (sample.token_log_probs.empty())
    throw Error(ErrorCode::NoLogProbs, "sample '" + sample.text + "' has no token log-probs");
  double total = 0.0;
  for (double lp : sample.token_log_probs) total += lp;
  return total;
}

std::vector<double> cluster_log_probs(const GenerationSet& gen_set, const SemanticClustering& clustering) {
  if (!clustering.is_partition_of(gen_set.samples.size()))
    throw Error(ErrorCode::BadPartition, "clustering does not partition the samples of '" + gen_set.id + "'");
  std::vector<double> out;
  out.reserve(clustering.size());
  std::vector<double> member_lp;
  for (const auto& cluster : clustering.clusters) {
    member_lp.clear();
    for (auto idx : cluster) member_lp.push_back(sequence_log_prob(gen_set.samples[idx]));
    out.push_back(log_sum_exp(member_lp));
  }
  return out;
}

double semantic_entropy_mc(std::span<const double> cluster_log_probs) {
  if (cluster_log_probs.empty()) throw Error(ErrorCode::EmptyClusters, "no clusters");
  double total = 0.0;
  for (double lp : cluster_log_probs) total += lp;
  return -total / static_cast<double>(cluster_log_probs.size());
}

double semantic_entropy_discrete(const SemanticClustering& clustering, std::size_t n) {
  if (n == 0 || !clustering.is_partition_of(n))
    throw Error(ErrorCode::BadPartition, "clustering does not partition " + std::to_string(n) + " items");
  const double total = static_cast<double>(n);
  double h = 0.0;
  for (const auto& c : clustering.clusters) {
    const double p = static_cast<double>(c.size()) / total;
    h -= p * std::log(p);
  }
  return std::max(0.0, h);
}

double naive_entropy(const GenerationSet& gen_set) {
  if (gen_set.samples.empty()) throw Error(ErrorCode::NoLogProbs, "no samples in '" + gen_set.id + "'");
  double total = 0.0;
  for (const auto& s : gen_set.samples)
    total += sequence_log_prob(s) / static_cast<double>(s.token_log_probs.size());
  return -total / static_cast<double>(gen_set.samples.size());
}

double neg_log_likelihood(const GenerationSample& greedy) {
  return -sequence_log_prob(greedy) / static_cast<double>(greedy.token_log_probs.size());
}

bool has_log_probs(const GenerationSet& gen_set) {
  return !gen_set.samples.empty() &&
         std::all_of(gen_set.samples.begin(), gen_set.samples.end(),
                     [](const GenerationSample& s) { return !s.token_log_probs.empty(); });
}

UncertaintyReport score_query(const GenerationSet& gen_set, const SemanticClustering& clustering,
                              std::optional<double> p_true) {
  UncertaintyReport r;
  r.id = gen_set.id;
  r.n_samples = static_cast<int>(gen_set.samples.size());
  r.n_clusters = static_cast<int>(clustering.size());
  r.semantic_entropy_discrete = semantic_entropy_discrete(clustering, gen_set.samples.size());
  if (has_log_probs(gen_set)) {
    const auto lps = cluster_log_probs(gen_set, clustering);
    r.semantic_entropy_mc = semantic_entropy_mc(lps);
    r.naive_entropy = naive_entropy(gen_set);
  }
  if (!gen_set.greedy.token_log_probs.empty()) r.neg_log_likelihood = neg_log_likelihood(gen_set.greedy);
  r.p_true = p_true;
  r.clusters = clustering;
  return r;
}

}  // namespace semprobe
