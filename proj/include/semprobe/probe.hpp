#pragma once

// Linear probes on hidden states: feature assembly, L2 logistic regression,
// prediction and JSON persistence.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semprobe/dataset_store.hpp"
#include "semprobe/kernels.hpp"

namespace semprobe {

enum class ProbeTarget { SE, ACCURACY };

std::string_view to_string(ProbeTarget t);
ProbeTarget parse_probe_target(std::string_view text);

struct FeatureSpec {
  Position position = Position::SLT;
  Stream stream = Stream::HIDDEN;
  std::vector<int> layers;
  std::uint32_t hidden_dim = 0;

  std::size_t concat_dim() const { return layers.size() * hidden_dim; }
  /// Layers non-empty, strictly increasing and below n_layers.
  void validate(std::uint32_t n_layers) const;
};

/// Parses "28..32", "28,29,30" or a mix ("1,4..6").
std::vector<int> parse_layer_list(std::string_view text);

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool is_identity() const { return mean.empty(); }
  /// Population mean/stddev per column; constant columns get stddev 1.
  static Standardizer fit(const FeatureMatrix& x);
  void apply(std::span<const double> in, std::span<double> out) const;
  FeatureMatrix apply(const FeatureMatrix& x) const;
};

struct TrainingMeta {
  std::vector<std::string> tasks;
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;  // final ∞-norm
};

struct ProbeModel {
  std::vector<double> weights;
  double bias = 0.0;
  FeatureSpec feature_spec;
  Standardizer standardizer;
  ProbeTarget target = ProbeTarget::SE;
  std::optional<double> gamma_star;
  TrainingMeta training_meta;
};

struct TrainingSet {
  FeatureMatrix features;
  std::vector<std::uint8_t> labels;
  std::vector<std::string> ids;

  /// n ≥ 2, both classes present, shapes agree, features finite.
  void validate() const;
};

struct FitOptions {
  double c = 1.0;  // inverse regularization strength
  bool standardize = true;
  std::uint64_t seed = 0;
  int max_iterations = 1000;
  double gradient_tolerance = 1e-6;
  int history = 10;  // L-BFGS memory
};

/// One row per id: the spec's layer vectors concatenated in layer order.
FeatureMatrix assemble_features(std::span<const HiddenStateRecord> records, const FeatureSpec& spec,
                                std::span<const std::string> ids);

/// Minimizes 0.5||w||² + C Σ log(1 + exp(−y(w·x + b))) with L-BFGS until the
/// gradient ∞-norm ≤ tolerance or max_iterations. Deterministic.
ProbeModel fit_probe(const TrainingSet& ts, const FitOptions& options = {},
                     ProbeTarget target = ProbeTarget::SE, std::optional<double> gamma_star = std::nullopt);

double predict_proba(const ProbeModel& model, std::span<const double> features);
std::vector<double> predict_proba(const ProbeModel& model, const FeatureMatrix& features);
/// Logits w·z + b. Same ranking as predict_proba without saturating at 0 or 1.
std::vector<double> decision_function(const ProbeModel& model, const FeatureMatrix& features);

inline constexpr int kProbeFormatVersion = 1;

void to_json(json& j, const ProbeModel& m);
void from_json(const json& j, ProbeModel& m);
void save_probe(const ProbeModel& model, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);

}  // namespace semprobe
