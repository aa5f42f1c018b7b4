#include "semprobe/binarization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "semprobe/error.hpp"

namespace semprobe {

namespace {

std::vector<std::pair<std::string, double>> with_index_ids(std::span<const double> values) {
  std::vector<std::pair<std::string, double>> out;
  out.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out.emplace_back(std::to_string(i), values[i]);
  return out;
}

struct ClassStats {
  double mean = 0.0;
  double sse = 0.0;
  std::size_t n = 0;
};

ClassStats two_pass(std::span<const double> values, auto&& member) {
  ClassStats s;
  double sum = 0.0;
  for (double v : values)
    if (member(v)) {
      sum += v;
      ++s.n;
    }
  if (s.n == 0) return s;
  s.mean = sum / static_cast<double>(s.n);
  for (double v : values)
    if (member(v)) s.sse += (v - s.mean) * (v - s.mean);
  return s;
}

SplitResult finish(SplitMethod method, double gamma,
                   std::span<const std::pair<std::string, double>> values) {
  std::vector<double> raw;
  raw.reserve(values.size());
  for (const auto& [id, v] : values) raw.push_back(v);
  const auto low = two_pass(raw, [&](double v) { return !(v > gamma); });
  const auto high = two_pass(raw, [&](double v) { return v > gamma; });
  if (low.n == 0 || high.n == 0)
    throw Error(ErrorCode::DegenerateInput, "threshold leaves one class empty");

  SplitResult r;
  r.method = method;
  r.gamma_star = gamma;
  r.objective_value = low.sse + high.sse;
  r.mean_low = low.mean;
  r.mean_high = high.mean;
  r.n_low = low.n;
  r.n_high = high.n;
  r.labels.reserve(values.size());
  for (const auto& [id, v] : values) r.labels.emplace_back(id, v > gamma ? 1 : 0);
  return r;
}

}  // namespace

SplitResult best_split(std::span<const std::pair<std::string, double>> values) {
  std::vector<double> sorted;
  sorted.reserve(values.size());
  for (const auto& [id, v] : values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::DegenerateInput, "non-finite score for '" + id + "'");
    sorted.push_back(v);
  }
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  if (n < 2 || sorted.front() == sorted.back())
    throw Error(ErrorCode::DegenerateInput, "best split needs at least 2 distinct values");

  // Welford prefix (left) and suffix (right) sums of squared deviations.
  std::vector<double> left_sse(n), right_sse(n);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double delta = sorted[i] - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (sorted[i] - mean);
    left_sse[i] = m2;
  }
  const double total = m2;
  mean = 0.0;
  m2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = n - 1 - k;
    const double delta = sorted[i] - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (sorted[i] - mean);
    right_sse[i] = m2;
  }

  std::vector<std::pair<std::size_t, double>> candidates;  // split after index i
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (!(sorted[i] < sorted[i + 1])) continue;
    const double obj = left_sse[i] + right_sse[i + 1];
    candidates.emplace_back(i, obj);
    best = std::min(best, obj);
  }
  const double tie = 1e-14 * std::max(total, std::numeric_limits<double>::min());
  std::size_t chosen = candidates.front().first;
  for (const auto& [i, obj] : candidates)
    if (obj <= best + tie) {
      chosen = i;
      break;
    }
  const double gamma = sorted[chosen] + (sorted[chosen + 1] - sorted[chosen]) / 2.0;
  return finish(SplitMethod::BEST, gamma, values);
}

SplitResult best_split(std::span<const double> values) {
  const auto ided = with_index_ids(values);
  return best_split(std::span<const std::pair<std::string, double>>(ided));
}

SplitResult even_split(std::span<const std::pair<std::string, double>> values) {
  if (values.size() < 2) throw Error(ErrorCode::DegenerateInput, "even split needs at least 2 values");
  std::vector<double> sorted;
  for (const auto& [id, v] : values) sorted.push_back(v);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double gamma = n % 2 == 1 ? sorted[n / 2]
                                  : sorted[n / 2 - 1] + (sorted[n / 2] - sorted[n / 2 - 1]) / 2.0;
  return finish(SplitMethod::EVEN, gamma, values);
}

SplitResult even_split(std::span<const double> values) {
  const auto ided = with_index_ids(values);
  return even_split(std::span<const std::pair<std::string, double>>(ided));
}

std::optional<double> split_objective(std::span<const double> values, double gamma) {
  const auto low = two_pass(values, [&](double v) { return v < gamma; });
  const auto high = two_pass(values, [&](double v) { return v >= gamma; });
  if (low.n == 0 || high.n == 0) return std::nullopt;
  return low.sse + high.sse;
}

std::vector<CurvePoint> objective_curve(std::span<const double> values, std::span<const double> gammas) {
  std::vector<CurvePoint> out;
  out.reserve(gammas.size());
  for (double g : gammas) out.push_back({g, split_objective(values, g)});
  return out;
}

void to_json(json& j, const SplitResult& r) {
  json labels = json::object();
  for (const auto& [id, label] : r.labels) labels[id] = label;
  j = json{{"method", r.method == SplitMethod::BEST ? "best" : "even"},
           {"threshold", r.gamma_star},
           {"objective", r.objective_value},
           {"class_means", {r.mean_low, r.mean_high}},
           {"class_sizes", {r.n_low, r.n_high}},
           {"labels", labels}};
}

void from_json(const json& j, SplitResult& r) {
  r.method = j.at("method").get<std::string>() == "even" ? SplitMethod::EVEN : SplitMethod::BEST;
  r.gamma_star = j.at("threshold").get<double>();
  r.objective_value = j.at("objective").get<double>();
  const auto means = j.at("class_means").get<std::vector<double>>();
  const auto sizes = j.at("class_sizes").get<std::vector<std::size_t>>();
  if (means.size() != 2 || sizes.size() != 2) throw Error(ErrorCode::SchemaMismatch, "split class stats");
  r.mean_low = means[0];
  r.mean_high = means[1];
  r.n_low = sizes[0];
  r.n_high = sizes[1];
  r.labels.clear();
  for (auto it = j.at("labels").begin(); it != j.at("labels").end(); ++it)
    r.labels.emplace_back(it.key(), it.value().get<int>());
}

}  // namespace semprobe
