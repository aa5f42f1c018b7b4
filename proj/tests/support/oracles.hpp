#pragma once

// Slow, obviously-correct reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace oracle {

/// Partition of [0, n) as the connected components of `same` (closure),
/// canonicalized: each block sorted, blocks ordered by their smallest element.
inline std::vector<std::vector<std::size_t>> closure_partition(
    std::size_t n, const std::function<bool(std::size_t, std::size_t)>& same) {
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    return parent[x] == x ? x : parent[x] = find(parent[x]);
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (same(i, j) && same(j, i)) parent[find(i)] = find(j);
  std::map<std::size_t, std::vector<std::size_t>> blocks;
  for (std::size_t i = 0; i < n; ++i) blocks[find(i)].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [_, b] : blocks) out.push_back(std::move(b));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

/// Within-class SSE computed the naive way for classes {v < g} and {v >= g}.
inline double sse_split(std::span<const double> v, double g) {
  double s0 = 0, s1 = 0;
  std::size_t n0 = 0, n1 = 0;
  for (double x : v) (x < g ? (s0 += x, ++n0) : (s1 += x, ++n1));
  const double m0 = n0 ? s0 / n0 : 0.0, m1 = n1 ? s1 / n1 : 0.0;
  double out = 0;
  for (double x : v) out += x < g ? (x - m0) * (x - m0) : (x - m1) * (x - m1);
  return out;
}

struct BruteSplit {
  double gamma = 0;
  double objective = std::numeric_limits<double>::infinity();
};

/// Exhaustive scan over midpoints of consecutive distinct values; the first
/// (smallest) midpoint wins exact ties.
inline BruteSplit brute_force_split(std::span<const double> values) {
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  BruteSplit best;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    const double g = s[i] + (s[i + 1] - s[i]) / 2;
    const double obj = sse_split(values, g);
    if (obj < best.objective) best = {g, obj};
  }
  return best;
}

/// Twice the Mann-Whitney U by counting every (positive, negative) pair:
/// 2 for a win, 1 for a tie.
inline std::uint64_t pairwise_twice_u(std::span<const double> scores, std::span<const std::uint8_t> gold) {
  std::uint64_t u2 = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!gold[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (gold[j]) continue;
      u2 += scores[i] > scores[j] ? 2 : scores[i] == scores[j] ? 1 : 0;
    }
  }
  return u2;
}

inline double pairwise_auroc(std::span<const double> scores, std::span<const std::uint8_t> gold) {
  std::uint64_t pos = 0;
  for (auto g : gold) pos += g ? 1 : 0;
  const std::uint64_t neg = gold.size() - pos;
  return static_cast<double>(pairwise_twice_u(scores, gold)) / static_cast<double>(2 * pos * neg);
}

/// Central differences of f at x with step h per coordinate.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double up = f(x);
    x[i] = xi - h;
    const double down = f(x);
    x[i] = xi;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// Hyndman-Fan type 7 quantile, written out from its definition.
inline double reference_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - std::floor(h)) * (v[hi] - v[lo]);
}

/// Entropy of a histogram, by definition.
inline double entropy_of_counts(const std::vector<std::size_t>& counts) {
  double n = 0;
  for (auto c : counts) n += static_cast<double>(c);
  double h = 0;
  for (auto c : counts)
    if (c) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace oracle
