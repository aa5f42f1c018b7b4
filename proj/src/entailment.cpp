#include "semprobe/entailment.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "semprobe/error.hpp"
#include "semprobe/log.hpp"
#include "semprobe/text.hpp"

namespace semprobe {

namespace fs = std::filesystem;

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::LEXICAL: return "lexical";
    case BackendKind::NLI_HTTP: return "nli";
    case BackendKind::LLM_JUDGE: return "judge";
    case BackendKind::ORACLE: return "oracle";
  }
  return "lexical";
}

BackendKind parse_backend_kind(std::string_view text) {
  const auto t = to_lower(text);
  if (t == "lexical") return BackendKind::LEXICAL;
  if (t == "nli" || t == "nli_http") return BackendKind::NLI_HTTP;
  if (t == "judge" || t == "llm_judge") return BackendKind::LLM_JUDGE;
  if (t == "oracle") return BackendKind::ORACLE;
  throw Error(ErrorCode::ParseError, "unknown entailment backend '" + std::string(text) + "'");
}

EntailmentJudgment LexicalBackend::judge(std::string_view premise, std::string_view hypothesis) const {
  const bool same = normalize_answer(premise) == normalize_answer(hypothesis);
  return {same ? EntailmentLabel::ENTAILMENT : EntailmentLabel::NEUTRAL, kind(), false};
}

// ---- NLI service -----------------------------------------------------------

NliHttpBackend::NliHttpBackend(GatewayConfig config, std::string path)
    : config_(std::move(config)), path_(std::move(path)) {
  config_.validate();
}

EntailmentLabel parse_nli_response(const json& body) {
  try {
    if (auto scores = body.find("scores"); scores != body.end() && scores->is_object() && !scores->empty()) {
      // Fixed key order keeps exact ties deterministic.
      const char* order[] = {"entailment", "neutral", "contradiction"};
      const char* best = nullptr;
      double best_score = 0.0;
      for (const char* k : order) {
        auto it = scores->find(k);
        if (it == scores->end()) continue;
        const double v = it->get<double>();
        if (!best || v > best_score) {
          best = k;
          best_score = v;
        }
      }
      if (best) return parse_entailment_label(best);
    }
    return parse_entailment_label(body.at("label").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedResponse, std::string("NLI response: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::MalformedResponse, std::string("NLI response: ") + e.what());
  }
}

EntailmentJudgment NliHttpBackend::judge(std::string_view premise, std::string_view hypothesis) const {
  const json request{{"premise", premise}, {"hypothesis", hypothesis}};
  std::string raw;
  try {
    raw = post_with_retry(config_, path_, request.dump());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::GatewayTimeout || e.code() == ErrorCode::RateLimited)
      throw Error(ErrorCode::BackendUnavailable, e.what());
    throw;
  }
  json body;
  try {
    body = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedResponse, e.what());
  }
  return {parse_nli_response(body), kind(), false};
}

// ---- LLM judge -------------------------------------------------------------

LlmJudgeBackend::LlmJudgeBackend(std::shared_ptr<const GatewayClient> client)
    : client_(std::move(client)) {}

EntailmentJudgment LlmJudgeBackend::judge(std::string_view premise, std::string_view hypothesis) const {
  try {
    return {client_->judge_entailment(premise, hypothesis), kind(), false};
  } catch (const Error& e) {
    if (e.code() == ErrorCode::GatewayTimeout || e.code() == ErrorCode::RateLimited)
      throw Error(ErrorCode::BackendUnavailable, e.what());
    throw;
  }
}

// ---- synthetic oracle ------------------------------------------------------

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

MeaningOracleBackend::MeaningOracleBackend(std::unordered_map<std::string, std::string> meaning_of,
                                           double flip_rate, std::uint64_t seed)
    : meaning_of_(std::move(meaning_of)), flip_rate_(flip_rate), seed_(seed) {
  if (!(flip_rate_ >= 0.0 && flip_rate_ <= 1.0))
    throw Error(ErrorCode::BadConfig, "label flip rate must lie in [0, 1]");
}

void MeaningOracleBackend::add(std::string text, std::string meaning) {
  meaning_of_[std::move(text)] = std::move(meaning);
}

EntailmentJudgment MeaningOracleBackend::judge(std::string_view premise, std::string_view hypothesis) const {
  const auto a = meaning_of_.find(std::string(premise));
  const auto b = meaning_of_.find(std::string(hypothesis));
  bool same = premise == hypothesis || a != meaning_of_.end() && b != meaning_of_.end() && a->second == b->second;
  if (flip_rate_ > 0.0 && premise != hypothesis) {
    std::string key = std::to_string(seed_);
    key += '\x1f';
    key += premise;
    key += '\x1f';
    key += hypothesis;
    const double u = static_cast<double>(fnv1a64(key) >> 11) * 0x1.0p-53;
    if (u < flip_rate_) same = !same;
  }
  return {same ? EntailmentLabel::ENTAILMENT : EntailmentLabel::NEUTRAL, kind(), false};
}

// ---- cache -----------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string EntailmentCache::key(std::string_view a, std::string_view b, BackendKind kind) {
  return hex64(fnv1a64(a)) + hex64(fnv1a64(b)) + std::string(to_string(kind));
}

EntailmentCache::EntailmentCache(fs::path path) : path_(std::move(path)) {
  std::vector<json> compacted;
  if (fs::exists(path_)) {
    try {
      std::unordered_map<std::string, std::size_t> slot;
      for_each_jsonl(path_, [&](const json& row, std::size_t) {
        const auto a = row.at("a_hash").get<std::string>();
        const auto b = row.at("b_hash").get<std::string>();
        const auto backend = parse_backend_kind(row.at("backend").get<std::string>());
        const auto label = parse_entailment_label(row.at("label").get<std::string>());
        if (a.size() != 16 || b.size() != 16) throw Error(ErrorCode::CacheCorrupt, "bad hash width");
        const auto k = a + b + std::string(to_string(backend));
        entries_[k] = label;
        if (auto it = slot.find(k); it != slot.end()) {
          compacted[it->second]["label"] = to_string(label);
        } else {
          slot.emplace(k, compacted.size());
          compacted.push_back(row);
        }
      });
    } catch (const std::exception& e) {
      warn("entailment cache " + path_.string() + " is corrupt (" + e.what() + "); rebuilding from empty");
      entries_.clear();
      compacted.clear();
      rebuilt_ = true;
    }
  }
  write_jsonl(path_, compacted);
}

std::optional<EntailmentLabel> EntailmentCache::get(std::string_view a, std::string_view b,
                                                    BackendKind kind) const {
  std::shared_lock lock(mutex_);
  if (auto it = entries_.find(key(a, b, kind)); it != entries_.end()) return it->second;
  return std::nullopt;
}

void EntailmentCache::put(std::string_view a, std::string_view b, BackendKind kind, EntailmentLabel label) {
  const json row{{"a_hash", hex64(fnv1a64(a))},
                 {"b_hash", hex64(fnv1a64(b))},
                 {"backend", to_string(kind)},
                 {"label", to_string(label)}};
  std::unique_lock lock(mutex_);
  entries_[key(a, b, kind)] = label;
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path_.string());
  out << row.dump() << '\n';
}

std::size_t EntailmentCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

CachedBackend::CachedBackend(std::shared_ptr<const EntailmentBackend> inner,
                             std::shared_ptr<EntailmentCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

EntailmentJudgment CachedBackend::judge(std::string_view premise, std::string_view hypothesis) const {
  const auto k = inner_->kind();
  if (auto hit = cache_->get(premise, hypothesis, k)) return {*hit, k, true};

  std::string flight_key(premise);
  flight_key += '\x1f';
  flight_key += hypothesis;
  std::promise<EntailmentLabel> promise;
  std::shared_future<EntailmentLabel> waiting;
  {
    std::lock_guard lock(inflight_mutex_);
    if (auto it = inflight_.find(flight_key); it != inflight_.end()) {
      waiting = it->second;
    } else {
      // Re-check under the lock: another caller may have just finished.
      if (auto hit = cache_->get(premise, hypothesis, k)) return {*hit, k, true};
      inflight_.emplace(flight_key, promise.get_future().share());
    }
  }
  if (waiting.valid()) return {waiting.get(), k, true};

  try {
    ++inner_calls_;
    const auto label = inner_->judge(premise, hypothesis).label;
    cache_->put(premise, hypothesis, k, label);
    promise.set_value(label);
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(flight_key);
    return {label, k, false};
  } catch (...) {
    promise.set_exception(std::current_exception());
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(flight_key);
    throw;
  }
}

EntailmentJudgment entails(std::string_view a, std::string_view b, const EntailmentBackend& backend) {
  const auto ta = trim(a);
  const auto tb = trim(b);
  if (ta.empty() || tb.empty()) throw Error(ErrorCode::EmptyText, "entailment on empty text");
  return backend.judge(ta, tb);
}

bool bidirectional_equivalent(std::string_view a, std::string_view b, const EntailmentBackend& backend) {
  return entails(a, b, backend).label == EntailmentLabel::ENTAILMENT &&
         entails(b, a, backend).label == EntailmentLabel::ENTAILMENT;
}

}  // namespace semprobe
