#include "semprobe/dataset_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "semprobe/error.hpp"

namespace semprobe {

namespace fs = std::filesystem;

std::string_view to_string(Position p) {
  return p == Position::SLT ? "SLT" : "TBG";
}

std::string_view to_string(Stream s) {
  switch (s) {
    case Stream::HIDDEN: return "HIDDEN";
    case Stream::RESIDUAL: return "RESIDUAL";
    case Stream::MLP: return "MLP";
  }
  return "HIDDEN";
}

namespace {

std::string upper(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

}  // namespace

Position parse_position(std::string_view text) {
  const auto u = upper(text);
  if (u == "SLT") return Position::SLT;
  if (u == "TBG") return Position::TBG;
  throw Error(ErrorCode::ParseError, "unknown position '" + std::string(text) + "'");
}

Stream parse_stream(std::string_view text) {
  const auto u = upper(text);
  if (u == "HIDDEN") return Stream::HIDDEN;
  if (u == "RESIDUAL") return Stream::RESIDUAL;
  if (u == "MLP") return Stream::MLP;
  throw Error(ErrorCode::ParseError, "unknown stream '" + std::string(text) + "'");
}

bool ArchiveFilter::accepts(const HiddenStateRecord& r) const {
  if (position && *position != r.position) return false;
  if (stream && *stream != r.stream) return false;
  if (layers && std::find(layers->begin(), layers->end(), static_cast<int>(r.layer)) == layers->end())
    return false;
  return true;
}

// ---- JSON mappings ---------------------------------------------------------

void to_json(json& j, const QARecord& r) {
  j = json{{"id", r.id}, {"question", r.question}, {"answers", r.answers}, {"dataset", r.dataset}};
  if (r.context) j["context"] = *r.context;
}

void from_json(const json& j, QARecord& r) {
  r.id = j.at("id").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.answers = j.at("answers").get<std::vector<std::string>>();
  r.dataset = j.value("dataset", std::string{});
  if (auto it = j.find("context"); it != j.end() && !it->is_null())
    r.context = it->get<std::string>();
  else
    r.context.reset();
}

void to_json(json& j, const GenerationSample& s) {
  j = json{{"text", s.text}, {"token_log_probs", s.token_log_probs}, {"temperature", s.temperature}};
}

void from_json(const json& j, GenerationSample& s) {
  s.text = j.at("text").get<std::string>();
  s.token_log_probs = j.value("token_log_probs", std::vector<double>{});
  s.temperature = j.value("temperature", 0.0);
}

void to_json(json& j, const DecodeConfig& c) {
  j = json{{"n_samples", c.n_samples}, {"temperature", c.temperature}, {"top_p", c.top_p},
           {"top_k", c.top_k}};
}

void from_json(const json& j, DecodeConfig& c) {
  const DecodeConfig defaults;
  c.n_samples = j.value("n_samples", defaults.n_samples);
  c.temperature = j.value("temperature", defaults.temperature);
  c.top_p = j.value("top_p", defaults.top_p);
  c.top_k = j.value("top_k", defaults.top_k);
}

void to_json(json& j, const GenerationSet& g) {
  j = json{{"id", g.id}, {"greedy", g.greedy}, {"samples", g.samples},
           {"decode_config", g.decode_config}};
}

void from_json(const json& j, GenerationSet& g) {
  g.id = j.at("id").get<std::string>();
  g.greedy = j.at("greedy").get<GenerationSample>();
  g.samples = j.at("samples").get<std::vector<GenerationSample>>();
  g.decode_config = j.value("decode_config", DecodeConfig{});
}

void to_json(json& j, const ArchiveManifest& m) {
  std::vector<std::string> positions, streams;
  for (auto p : m.positions) positions.emplace_back(to_string(p));
  for (auto s : m.streams) streams.emplace_back(to_string(s));
  j = json{{"model_name", m.model_name}, {"hidden_dim", m.hidden_dim}, {"n_layers", m.n_layers},
           {"positions", positions},      {"streams", streams},         {"record_count", m.record_count},
           {"dtype", m.dtype}};
}

void from_json(const json& j, ArchiveManifest& m) {
  m.model_name = j.at("model_name").get<std::string>();
  m.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
  m.n_layers = j.at("n_layers").get<std::uint32_t>();
  m.positions.clear();
  m.streams.clear();
  for (const auto& p : j.value("positions", std::vector<std::string>{}))
    m.positions.push_back(parse_position(p));
  for (const auto& s : j.value("streams", std::vector<std::string>{}))
    m.streams.push_back(parse_stream(s));
  m.record_count = j.at("record_count").get<std::uint64_t>();
  m.dtype = j.value("dtype", std::string("f32le"));
}

// ---- JSONL -----------------------------------------------------------------

void for_each_jsonl(const fs::path& path, const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object())
      throw Error(ErrorCode::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": expected a JSON object");
    try {
      fn(obj, line_no);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& row : rows) out << row.dump() << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

std::vector<QARecord> read_qa_jsonl(const fs::path& path) {
  std::vector<QARecord> records;
  std::unordered_set<std::string> seen;
  for_each_jsonl(path, [&](const json& obj, std::size_t line_no) {
    auto rec = obj.get<QARecord>();
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (rec.question.empty()) throw Error(ErrorCode::ParseError, where + ": empty question");
    if (rec.answers.empty()) throw Error(ErrorCode::ParseError, where + ": answers must be non-empty");
    if (!seen.insert(rec.id).second)
      throw Error(ErrorCode::DuplicateId, where + ": duplicate id '" + rec.id + "'");
    records.push_back(std::move(rec));
  });
  return records;
}

void write_qa_jsonl(const fs::path& path, std::span<const QARecord> records) {
  std::vector<json> rows(records.begin(), records.end());
  write_jsonl(path, rows);
}

void validate(const GenerationSet& set) {
  auto check = [&](const GenerationSample& s) {
    for (double lp : s.token_log_probs)
      if (!(lp <= 0.0))
        throw Error(ErrorCode::ParseError, "generation set '" + set.id + "': log-prob " +
                                               std::to_string(lp) + " is not <= 0");
    if (s.temperature < 0.0)
      throw Error(ErrorCode::ParseError, "generation set '" + set.id + "': negative temperature");
  };
  check(set.greedy);
  for (const auto& s : set.samples) check(s);
  if (static_cast<std::size_t>(set.decode_config.n_samples) != set.samples.size())
    throw Error(ErrorCode::ParseError, "generation set '" + set.id + "': n_samples " +
                                           std::to_string(set.decode_config.n_samples) + " != " +
                                           std::to_string(set.samples.size()) + " samples");
}

std::vector<GenerationSet> read_generations_jsonl(const fs::path& path) {
  std::vector<GenerationSet> sets;
  std::unordered_set<std::string> seen;
  for_each_jsonl(path, [&](const json& obj, std::size_t line_no) {
    auto set = obj.get<GenerationSet>();
    validate(set);
    if (!seen.insert(set.id).second)
      throw Error(ErrorCode::DuplicateId,
                  path.string() + ":" + std::to_string(line_no) + ": duplicate id '" + set.id + "'");
    sets.push_back(std::move(set));
  });
  return sets;
}

void write_generations_jsonl(const fs::path& path, std::span<const GenerationSet> sets) {
  std::vector<json> rows(sets.begin(), sets.end());
  write_jsonl(path, rows);
}

// ---- hidden-state archive --------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'E', 'P', 'H'};

template <typename T>
void put_le(std::string& buf, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

void put_f32(std::string& buf, float value) {
  put_le(buf, std::bit_cast<std::uint32_t>(value));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      value |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return value;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw Error(ErrorCode::TruncatedFile, std::string("archive ends inside ") + what);
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t write_hidden_archive(ArchiveManifest manifest,
                                   std::span<const HiddenStateRecord> records,
                                   const fs::path& path) {
  if (manifest.hidden_dim == 0) throw Error(ErrorCode::DimMismatch, "hidden_dim must be > 0");
  manifest.record_count = records.size();
  manifest.dtype = "f32le";

  std::string buf;
  buf.append(kMagic, 4);
  put_le<std::uint32_t>(buf, kArchiveVersion);
  const std::string header = json(manifest).dump();
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(header.size()));
  buf += header;

  for (const auto& r : records) {
    if (r.vector.size() != manifest.hidden_dim)
      throw Error(ErrorCode::DimMismatch, "record '" + r.id + "' has " +
                                              std::to_string(r.vector.size()) +
                                              " components, manifest hidden_dim is " +
                                              std::to_string(manifest.hidden_dim));
    if (r.layer >= manifest.n_layers)
      throw Error(ErrorCode::DimMismatch, "record '" + r.id + "' layer " + std::to_string(r.layer) +
                                              " >= n_layers " + std::to_string(manifest.n_layers));
    if (r.id.size() > 0xFFFF) throw Error(ErrorCode::DimMismatch, "record id longer than 65535 bytes");
    for (float v : r.vector)
      if (!std::isfinite(v))
        throw Error(ErrorCode::NonFiniteFeature, "record '" + r.id + "' has a non-finite component");
    put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(r.id.size()));
    buf += r.id;
    buf.push_back(static_cast<char>(r.position));
    buf.push_back(static_cast<char>(r.stream));
    put_le<std::uint16_t>(buf, r.layer);
    for (float v : r.vector) put_f32(buf, v);
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
  return records.size();
}

std::pair<ArchiveManifest, std::vector<HiddenStateRecord>> read_hidden_archive(
    const fs::path& path, const ArchiveFilter& filter) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  ByteReader reader(data);
  if (data.size() < 4 || std::memcmp(data.data(), kMagic, 4) != 0)
    throw Error(ErrorCode::BadMagic, path.string() + " is not a hidden-state archive");
  reader.bytes(4, "magic");
  const auto version = reader.get_le<std::uint32_t>("version");
  if (version != kArchiveVersion)
    throw Error(ErrorCode::VersionUnsupported, "archive version " + std::to_string(version));
  const auto manifest_len = reader.get_le<std::uint32_t>("manifest length");
  ArchiveManifest manifest;
  try {
    manifest = json::parse(reader.bytes(manifest_len, "manifest")).get<ArchiveManifest>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, "archive manifest: " + std::string(e.what()));
  }
  if (manifest.hidden_dim == 0) throw Error(ErrorCode::ParseError, "archive manifest hidden_dim is 0");

  std::vector<HiddenStateRecord> records;
  for (std::uint64_t i = 0; i < manifest.record_count; ++i) {
    HiddenStateRecord r;
    const auto id_len = reader.get_le<std::uint16_t>("record id length");
    r.id = std::string(reader.bytes(id_len, "record id"));
    const auto pos = reader.get_le<std::uint8_t>("position");
    const auto stream = reader.get_le<std::uint8_t>("stream");
    if (pos > 1 || stream > 2)
      throw Error(ErrorCode::ParseError, "record '" + r.id + "' has an invalid position/stream tag");
    r.position = static_cast<Position>(pos);
    r.stream = static_cast<Stream>(stream);
    r.layer = reader.get_le<std::uint16_t>("layer");
    const auto raw = reader.bytes(std::size_t{manifest.hidden_dim} * 4, "record vector");
    if (!filter.accepts(r)) continue;
    r.vector.resize(manifest.hidden_dim);
    for (std::size_t k = 0; k < manifest.hidden_dim; ++k) {
      std::uint32_t bits = 0;
      for (std::size_t b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * k + b])) << (8 * b);
      r.vector[k] = std::bit_cast<float>(bits);
    }
    records.push_back(std::move(r));
  }
  if (!reader.done())
    throw Error(ErrorCode::ParseError, "trailing bytes after " +
                                           std::to_string(manifest.record_count) + " records");
  return {std::move(manifest), std::move(records)};
}

// ---- quantile band filter --------------------------------------------------

double quantile_linear(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "quantile of empty input");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

std::vector<std::string> filter_quantile_band(std::span<const std::pair<std::string, double>> values,
                                              double lo, double hi) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "quantile filter over no values");
  if (!(lo >= 0.0 && lo < hi && hi <= 1.0))
    throw Error(ErrorCode::BadBand, "need 0 <= lo < hi <= 1, got lo=" + std::to_string(lo) +
                                        " hi=" + std::to_string(hi));
  std::vector<double> sorted;
  sorted.reserve(values.size());
  for (const auto& [id, v] : values) sorted.push_back(v);
  std::sort(sorted.begin(), sorted.end());
  const double q_lo = quantile_linear(sorted, lo);
  const double q_hi = quantile_linear(sorted, hi);

  std::vector<std::string> kept;
  for (const auto& [id, v] : values)
    if (v <= q_lo || v >= q_hi) kept.push_back(id);
  return kept;
}

std::vector<std::string> filter_quantile_band_grouped(
    std::span<const std::pair<std::string, double>> values, std::span<const std::string> groups,
    double lo, double hi) {
  if (groups.size() != values.size())
    throw Error(ErrorCode::LengthMismatch, "one group label per value required");
  std::map<std::string, std::vector<std::pair<std::string, double>>> by_group;
  for (std::size_t i = 0; i < values.size(); ++i) by_group[groups[i]].push_back(values[i]);
  std::set<std::string> kept_ids;
  for (const auto& [group, members] : by_group)
    for (auto& id : filter_quantile_band(members, lo, hi)) kept_ids.insert(std::move(id));
  std::vector<std::string> kept;
  for (const auto& [id, v] : values)
    if (kept_ids.count(id)) kept.push_back(id);
  return kept;
}

}  // namespace semprobe
