#pragma once

// "Does a entail b?" behind one interface, with a persistent judgment cache.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>

#include "semprobe/gateway.hpp"

namespace semprobe {

/// ORACLE is the synthetic lab's ground-truth meaning map.
enum class BackendKind { LEXICAL, NLI_HTTP, LLM_JUDGE, ORACLE };

std::string_view to_string(BackendKind kind);
BackendKind parse_backend_kind(std::string_view text);

struct EntailmentJudgment {
  EntailmentLabel label = EntailmentLabel::NEUTRAL;
  BackendKind source = BackendKind::LEXICAL;
  bool cached = false;
};

class EntailmentBackend {
 public:
  virtual ~EntailmentBackend() = default;
  virtual BackendKind kind() const = 0;
  /// Directional judgment for non-empty, trimmed texts.
  virtual EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const = 0;
};

/// ENTAILMENT iff normalize_answer(a) == normalize_answer(b), else NEUTRAL.
class LexicalBackend final : public EntailmentBackend {
 public:
  BackendKind kind() const override { return BackendKind::LEXICAL; }
  EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const override;
};

/// Remote classifier: POST {premise, hypothesis} -> {label, scores}; the
/// argmax over scores decides when scores are present.
class NliHttpBackend final : public EntailmentBackend {
 public:
  explicit NliHttpBackend(GatewayConfig config, std::string path = "/nli");
  BackendKind kind() const override { return BackendKind::NLI_HTTP; }
  EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const override;

 private:
  GatewayConfig config_;
  std::string path_;
};

EntailmentLabel parse_nli_response(const json& body);

class LlmJudgeBackend final : public EntailmentBackend {
 public:
  explicit LlmJudgeBackend(std::shared_ptr<const GatewayClient> client);
  BackendKind kind() const override { return BackendKind::LLM_JUDGE; }
  EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const override;

 private:
  std::shared_ptr<const GatewayClient> client_;
};

/// Texts sharing a meaning key entail each other; anything else is NEUTRAL.
/// A non-zero flip rate swaps ENTAILMENT/NEUTRAL for a deterministic
/// pseudo-random subset of ordered pairs (simulated NLI errors).
class MeaningOracleBackend final : public EntailmentBackend {
 public:
  MeaningOracleBackend(std::unordered_map<std::string, std::string> meaning_of,
                       double flip_rate = 0.0, std::uint64_t seed = 0);
  BackendKind kind() const override { return BackendKind::ORACLE; }
  EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const override;
  void add(std::string text, std::string meaning);

 private:
  std::unordered_map<std::string, std::string> meaning_of_;
  double flip_rate_;
  std::uint64_t seed_;
};

std::uint64_t fnv1a64(std::string_view text);

/// Append-only JSONL journal of {a_hash, b_hash, backend, label}, compacted
/// on open. A corrupt journal is discarded with a warning.
class EntailmentCache {
 public:
  explicit EntailmentCache(std::filesystem::path path);

  std::optional<EntailmentLabel> get(std::string_view a, std::string_view b, BackendKind kind) const;
  void put(std::string_view a, std::string_view b, BackendKind kind, EntailmentLabel label);
  std::size_t size() const;
  /// True when open() found a corrupt journal and started from empty.
  bool rebuilt() const { return rebuilt_; }

 private:
  static std::string key(std::string_view a, std::string_view b, BackendKind kind);

  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, EntailmentLabel> entries_;
  bool rebuilt_ = false;
};

/// Decorates a backend with an EntailmentCache. Concurrent misses on the same
/// ordered pair share one underlying call.
class CachedBackend final : public EntailmentBackend {
 public:
  CachedBackend(std::shared_ptr<const EntailmentBackend> inner, std::shared_ptr<EntailmentCache> cache);
  BackendKind kind() const override { return inner_->kind(); }
  EntailmentJudgment judge(std::string_view premise, std::string_view hypothesis) const override;
  std::size_t inner_calls() const { return inner_calls_.load(); }

 private:
  std::shared_ptr<const EntailmentBackend> inner_;
  std::shared_ptr<EntailmentCache> cache_;
  mutable std::mutex inflight_mutex_;
  mutable std::unordered_map<std::string, std::shared_future<EntailmentLabel>> inflight_;
  mutable std::atomic<std::size_t> inner_calls_{0};
};

/// Validates non-empty inputs (EmptyText), then asks the backend.
EntailmentJudgment entails(std::string_view a, std::string_view b, const EntailmentBackend& backend);

bool bidirectional_equivalent(std::string_view a, std::string_view b, const EntailmentBackend& backend);

}  // namespace semprobe
