#include "semprobe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include <omp.h>

#include "semprobe/error.hpp"

namespace semprobe::kernels {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double t) {
  return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
}

namespace {

void check_shapes(const FeatureMatrix& x, std::span<const std::uint8_t> labels, std::span<const double> w,
                  std::span<double> grad) {
  if (labels.size() != x.rows || w.size() != x.cols || grad.size() != x.cols + 1)
    throw Error(ErrorCode::DimMismatch, "logistic objective shape mismatch");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

// Per-row residual r_i = dLoss_i/dz_i scaled by C, and loss_i.
inline void row_terms(double z, std::uint8_t label, double c, double& loss, double& r) {
  const double y = label ? 1.0 : -1.0;
  loss = c * softplus(-y * z);
  r = -c * y * sigmoid(-y * z);
}

constexpr std::size_t kMinColumnBlock = 256;

}  // namespace

double logistic_objective(const FeatureMatrix& x, std::span<const std::uint8_t> labels,
                          std::span<const double> w, double b, double c, std::span<double> grad) {
  check_shapes(x, labels, w, grad);
  const auto n = static_cast<std::ptrdiff_t>(x.rows);
  const std::size_t d = x.cols;
  std::vector<double> loss(x.rows), resid(x.rows);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    row_terms(dot(x.row(ui), w) + b, labels[ui], c, loss[ui], resid[ui]);
  }

  // Column blocks keep each gradient entry's summation order fixed (rows
  // ascending) whatever the thread count.
  const auto threads = static_cast<std::size_t>(omp_get_max_threads());
  const std::size_t width = std::max(kMinColumnBlock, (d + threads - 1) / threads);
  const auto blocks = static_cast<std::ptrdiff_t>((d + width - 1) / width);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t j0 = static_cast<std::size_t>(blk) * width;
    const std::size_t j1 = std::min(d, j0 + width);
    for (std::size_t j = j0; j < j1; ++j) grad[j] = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      const double* xi = x.data.data() + i * d;
      const double r = resid[i];
      for (std::size_t j = j0; j < j1; ++j) grad[j] += xi[j] * r;
    }
    for (std::size_t j = j0; j < j1; ++j) grad[j] += w[j];
  }

  double total = 0.0, gb = 0.0, reg = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    total += loss[i];
    gb += resid[i];
  }
  for (std::size_t j = 0; j < d; ++j) reg += w[j] * w[j];
  grad[d] = gb;
  return 0.5 * reg + total;
}

double logistic_objective_serial(const FeatureMatrix& x, std::span<const std::uint8_t> labels,
                                 std::span<const double> w, double b, double c, std::span<double> grad) {
  check_shapes(x, labels, w, grad);
  const std::size_t d = x.cols;
  std::fill(grad.begin(), grad.end(), 0.0);
  double total = 0.0, reg = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    double loss = 0.0, r = 0.0;
    row_terms(dot(x.row(i), w) + b, labels[i], c, loss, r);
    total += loss;
    const auto xi = x.row(i);
    for (std::size_t j = 0; j < d; ++j) grad[j] += xi[j] * r;
    grad[d] += r;
  }
  for (std::size_t j = 0; j < d; ++j) {
    grad[j] += w[j];
    reg += w[j] * w[j];
  }
  return 0.5 * reg + total;
}

std::vector<double> predict_proba(const FeatureMatrix& x, std::span<const double> w, double b) {
  if (w.size() != x.cols) throw Error(ErrorCode::DimMismatch, "weight length != feature width");
  std::vector<double> out(x.rows);
  const auto n = static_cast<std::ptrdiff_t>(x.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    out[ui] = sigmoid(dot(x.row(ui), w) + b);
  }
  return out;
}

std::vector<double> predict_proba_serial(const FeatureMatrix& x, std::span<const double> w, double b) {
  if (w.size() != x.cols) throw Error(ErrorCode::DimMismatch, "weight length != feature width");
  std::vector<double> out;
  out.reserve(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) out.push_back(sigmoid(dot(x.row(i), w) + b));
  return out;
}

std::vector<double> decision_function(const FeatureMatrix& x, std::span<const double> w, double b) {
  if (w.size() != x.cols) throw Error(ErrorCode::DimMismatch, "weight length != feature width");
  std::vector<double> out(x.rows);
  const auto n = static_cast<std::ptrdiff_t>(x.rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    out[ui] = dot(x.row(ui), w) + b;
  }
  return out;
}

std::vector<double> decision_function_serial(const FeatureMatrix& x, std::span<const double> w, double b) {
  if (w.size() != x.cols) throw Error(ErrorCode::DimMismatch, "weight length != feature width");
  std::vector<double> out;
  out.reserve(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) out.push_back(dot(x.row(i), w) + b);
  return out;
}

namespace {

void check_query_shapes(std::span<const GenerationSet> gen_sets, std::span<const SemanticClustering> clusterings,
                        std::span<const std::optional<double>> p_true) {
  if (gen_sets.size() != clusterings.size() || (!p_true.empty() && p_true.size() != gen_sets.size()))
    throw Error(ErrorCode::LengthMismatch, "one clustering (and p_true, if given) per generation set");
}

}  // namespace

std::vector<UncertaintyReport> score_queries(std::span<const GenerationSet> gen_sets,
                                             std::span<const SemanticClustering> clusterings,
                                             std::span<const std::optional<double>> p_true) {
  check_query_shapes(gen_sets, clusterings, p_true);
  std::vector<UncertaintyReport> out(gen_sets.size());
  std::vector<std::exception_ptr> errors(gen_sets.size());
  const auto n = static_cast<std::ptrdiff_t>(gen_sets.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    try {
      out[ui] = score_query(gen_sets[ui], clusterings[ui], p_true.empty() ? std::nullopt : p_true[ui]);
    } catch (...) {
      errors[ui] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<UncertaintyReport> score_queries_serial(std::span<const GenerationSet> gen_sets,
                                                    std::span<const SemanticClustering> clusterings,
                                                    std::span<const std::optional<double>> p_true) {
  check_query_shapes(gen_sets, clusterings, p_true);
  std::vector<UncertaintyReport> out;
  out.reserve(gen_sets.size());
  for (std::size_t i = 0; i < gen_sets.size(); ++i)
    out.push_back(score_query(gen_sets[i], clusterings[i], p_true.empty() ? std::nullopt : p_true[i]));
  return out;
}

int set_num_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
  return omp_get_max_threads();
}

}  // namespace semprobe::kernels
