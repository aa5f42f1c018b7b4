#pragma once

// High/low semantic-entropy labels from raw scores.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "semprobe/dataset_store.hpp"

namespace semprobe {

enum class SplitMethod { BEST, EVEN };

struct SplitResult {
  SplitMethod method = SplitMethod::BEST;
  double gamma_star = 0.0;
  double objective_value = 0.0;  // within-class sum of squared deviations
  std::vector<std::pair<std::string, int>> labels;  // input order, 1 = high SE
  double mean_low = 0.0;
  double mean_high = 0.0;
  std::size_t n_low = 0;
  std::size_t n_high = 0;
};

/// γ* minimizing the within-class squared deviation over midpoints of
/// consecutive distinct values; exact ties (relative 1e-14 of the total sum
/// of squares) go to the smallest γ. DegenerateInput for < 2 distinct values.
SplitResult best_split(std::span<const std::pair<std::string, double>> values);
SplitResult best_split(std::span<const double> values);

/// γ = median; labels 1[v > γ]. Heavy ties at the median may leave the
/// classes unequal; an empty class raises DegenerateInput.
SplitResult even_split(std::span<const std::pair<std::string, double>> values);
SplitResult even_split(std::span<const double> values);

/// Two-pass within-class squared deviation with classes {v < γ} and {v ≥ γ};
/// nullopt when either class is empty.
std::optional<double> split_objective(std::span<const double> values, double gamma);

struct CurvePoint {
  double gamma = 0.0;
  std::optional<double> objective;  // nullopt marks an empty class
};

std::vector<CurvePoint> objective_curve(std::span<const double> values, std::span<const double> gammas);

void to_json(json& j, const SplitResult& r);
void from_json(const json& j, SplitResult& r);

}  // namespace semprobe
