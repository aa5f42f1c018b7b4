#pragma once

// On-disk data model shared by every stage: QA records, generation sets,
// hidden-state archives and JSONL helpers.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace semprobe {

using json = nlohmann::json;

enum class Position : std::uint8_t { SLT = 0, TBG = 1 };
enum class Stream : std::uint8_t { HIDDEN = 0, RESIDUAL = 1, MLP = 2 };

std::string_view to_string(Position p);
std::string_view to_string(Stream s);
Position parse_position(std::string_view text);  // accepts "SLT"/"slt", "TBG"/"tbg"
Stream parse_stream(std::string_view text);

struct QARecord {
  std::string id;
  std::string question;
  std::optional<std::string> context;
  std::vector<std::string> answers;
  std::string dataset;
};

struct GenerationSample {
  std::string text;
  std::vector<double> token_log_probs;  // nats, one per generated token
  double temperature = 0.0;
};

struct DecodeConfig {
  int n_samples = 10;
  double temperature = 1.0;
  double top_p = 0.9;
  int top_k = 50;
};

struct GenerationSet {
  std::string id;
  GenerationSample greedy;
  std::vector<GenerationSample> samples;
  DecodeConfig decode_config;
};

struct HiddenStateRecord {
  std::string id;
  Position position = Position::SLT;
  Stream stream = Stream::HIDDEN;
  std::uint16_t layer = 0;
  std::vector<float> vector;
};

struct ArchiveManifest {
  std::string model_name;
  std::uint32_t hidden_dim = 0;
  std::uint32_t n_layers = 0;
  std::vector<Position> positions;
  std::vector<Stream> streams;
  std::uint64_t record_count = 0;
  std::string dtype = "f32le";
};

struct ArchiveFilter {
  std::optional<Position> position;
  std::optional<Stream> stream;
  std::optional<std::vector<int>> layers;

  bool accepts(const HiddenStateRecord& r) const;
};

// JSON mappings use exactly the field names of the on-disk schemas.
void to_json(json& j, const QARecord& r);
void from_json(const json& j, QARecord& r);
void to_json(json& j, const GenerationSample& s);
void from_json(const json& j, GenerationSample& s);
void to_json(json& j, const DecodeConfig& c);
void from_json(const json& j, DecodeConfig& c);
void to_json(json& j, const GenerationSet& g);
void from_json(const json& j, GenerationSet& g);
void to_json(json& j, const ArchiveManifest& m);
void from_json(const json& j, ArchiveManifest& m);

/// Calls `fn(object, line_number)` for every non-blank line. Malformed JSON
/// raises ParseError naming the 1-based line.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const json&, std::size_t)>& fn);
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);

std::vector<QARecord> read_qa_jsonl(const std::filesystem::path& path);
void write_qa_jsonl(const std::filesystem::path& path, std::span<const QARecord> records);

std::vector<GenerationSet> read_generations_jsonl(const std::filesystem::path& path);
void write_generations_jsonl(const std::filesystem::path& path,
                             std::span<const GenerationSet> sets);

/// Checks GenerationSample / GenerationSet invariants (log-probs ≤ 0,
/// n_samples == samples.size()). Throws ParseError on violation.
void validate(const GenerationSet& set);

/// Binary archive: magic "SEPH", u32 version 1, u32 manifest length, manifest
/// JSON, then packed little-endian records. The manifest's record_count is
/// set from `records`. Returns the number of records written.
std::uint64_t write_hidden_archive(ArchiveManifest manifest,
                                   std::span<const HiddenStateRecord> records,
                                   const std::filesystem::path& path);

std::pair<ArchiveManifest, std::vector<HiddenStateRecord>> read_hidden_archive(
    const std::filesystem::path& path, const ArchiveFilter& filter = {});

inline constexpr std::uint32_t kArchiveVersion = 1;

/// Linear interpolation between order statistics over `sorted` (ascending).
double quantile_linear(std::span<const double> sorted, double p);

/// Keeps (id, v) iff v ≤ Q(lo) or v ≥ Q(hi). Order of the input is preserved.
std::vector<std::string> filter_quantile_band(
    std::span<const std::pair<std::string, double>> values, double lo = 0.55, double hi = 0.80);

/// Same rule applied independently inside each group (e.g. per task).
/// `groups[i]` labels `values[i]`.
std::vector<std::string> filter_quantile_band_grouped(
    std::span<const std::pair<std::string, double>> values,
    std::span<const std::string> groups, double lo = 0.55, double hi = 0.80);

}  // namespace semprobe
