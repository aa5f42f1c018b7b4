#pragma once

// Data-parallel inner loops. Each OpenMP kernel has a serial reference with
// the same per-element arithmetic order, so results agree bit-for-bit
// regardless of thread count.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "semprobe/uncertainty.hpp"

namespace semprobe {

/// Dense row-major matrix of doubles.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

namespace kernels {

double sigmoid(double z);
/// log(1 + exp(t)) without overflow.
double softplus(double t);

/// L2-regularized logistic objective
///   0.5 ||w||² + C Σ_i log(1 + exp(−y_i (w·x_i + b))),  y_i = 2·label_i − 1
/// (bias unpenalized). Writes the gradient (w first, bias last; size D + 1).
double logistic_objective(const FeatureMatrix& x, std::span<const std::uint8_t> labels,
                          std::span<const double> w, double b, double c, std::span<double> grad);
double logistic_objective_serial(const FeatureMatrix& x, std::span<const std::uint8_t> labels,
                                 std::span<const double> w, double b, double c, std::span<double> grad);

/// sigmoid(w·x_i + b) for every row.
std::vector<double> predict_proba(const FeatureMatrix& x, std::span<const double> w, double b);
std::vector<double> predict_proba_serial(const FeatureMatrix& x, std::span<const double> w, double b);

/// w·x_i + b for every row.
std::vector<double> decision_function(const FeatureMatrix& x, std::span<const double> w, double b);
std::vector<double> decision_function_serial(const FeatureMatrix& x, std::span<const double> w, double b);

/// score_query for every (generation set, clustering) pair.
std::vector<UncertaintyReport> score_queries(std::span<const GenerationSet> gen_sets,
                                             std::span<const SemanticClustering> clusterings,
                                             std::span<const std::optional<double>> p_true = {});
std::vector<UncertaintyReport> score_queries_serial(std::span<const GenerationSet> gen_sets,
                                                    std::span<const SemanticClustering> clusterings,
                                                    std::span<const std::optional<double>> p_true = {});

/// Sets the OpenMP thread count when n > 0; returns the active maximum.
int set_num_threads(int n);

}  // namespace kernels
}  // namespace semprobe
