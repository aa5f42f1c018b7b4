#pragma once

// Client for OpenAI-compatible completion endpoints and the prompt templates
// used for generation, p(True) scoring and LLM judging.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "semprobe/dataset_store.hpp"

namespace semprobe {

enum class EntailmentLabel { ENTAILMENT, CONTRADICTION, NEUTRAL };

std::string_view to_string(EntailmentLabel label);
EntailmentLabel parse_entailment_label(std::string_view text);

struct GatewayConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string api_key;  // filled from SEMPROBE_API_KEY by from_json/with_env_key
  std::string model_name;
  double timeout_seconds = 60.0;
  int max_retries = 3;
  int max_parallel_requests = 4;
  bool chat = false;            // /v1/chat/completions instead of /v1/completions
  bool send_top_k = true;       // not every server accepts top_k
  double backoff_initial_seconds = 0.5;
  double backoff_max_seconds = 8.0;
  int short_form_max_tokens = 64;
  int long_form_max_tokens = 128;
  int judge_max_tokens = 16;

  /// Throws BadConfig when max_parallel_requests < 1 or timeout <= 0.
  void validate() const;
  /// Copies SEMPROBE_API_KEY into api_key when the variable is set.
  GatewayConfig& with_env_key();
};

void from_json(const json& j, GatewayConfig& c);
void to_json(json& j, const GatewayConfig& c);  // api_key is never serialized

enum class TemplateKind { SHORT_FORM, LONG_FORM, CONTEXT, PTRUE, ENTAILMENT_JUDGE, CORRECTNESS_JUDGE };

std::string_view to_string(TemplateKind kind);
TemplateKind parse_template_kind(std::string_view text);

struct FewShotExample {
  std::string question;
  std::string answer;
};

/// One demonstration block of the p(True) prompt.
struct PTrueBlock {
  std::string question;
  std::vector<std::string> brainstormed;
  std::string possible_answer;
  bool is_true = false;
};

struct PromptTemplate {
  TemplateKind kind = TemplateKind::SHORT_FORM;
  std::vector<FewShotExample> few_shot;  // SHORT_FORM: exactly 5
  std::vector<PTrueBlock> ptrue_blocks;  // PTRUE: exactly 10
};

inline constexpr std::size_t kShortFormDemos = 5;
inline constexpr std::size_t kPTrueBlocks = 10;

/// Slot values that do not live on the QARecord.
struct PromptExtras {
  std::vector<std::string> brainstormed;  // PTRUE query block
  std::string possible_answer;            // PTRUE query block
  std::string answer_a;                   // ENTAILMENT_JUDGE
  std::string answer_b;                   // ENTAILMENT_JUDGE
  std::string proposed;                   // CORRECTNESS_JUDGE
};

std::string render_prompt(const PromptTemplate& tmpl, const QARecord& record,
                          const PromptExtras& extras = {});

std::string render_ptrue_block(const PTrueBlock& block);
std::string render_entailment_prompt(std::string_view answer_a, std::string_view answer_b);

// ---- wire-level types ------------------------------------------------------

struct CompletionRequest {
  std::string prompt;
  double temperature = 0.0;
  std::optional<double> top_p;
  std::optional<int> top_k;
  int max_tokens = 64;
  int n = 1;
  int top_logprobs = 0;  // 0: sampled-token log-probs only
  bool want_logprobs = true;
  std::vector<std::string> stop;
};

struct CompletionChoice {
  std::string text;
  std::vector<double> token_log_probs;
  std::vector<std::map<std::string, double>> top_log_probs;  // per position
};

json build_request_body(const GatewayConfig& config, const CompletionRequest& request);
std::vector<CompletionChoice> parse_completion_response(const json& body, bool chat);

/// Probability mass of tokens whose whitespace-stripped text is "A".
double p_true_from_top_logprobs(const std::map<std::string, double>& top);

/// Earliest keyword (entailment/contradiction/neutral, case-insensitive)
/// wins; `matched` reports whether any keyword occurred.
EntailmentLabel parse_entailment_reply(std::string_view reply, bool* matched = nullptr);

/// Leading yes/no verdict decides; otherwise a reply containing exactly one of
/// the words decides; anything else raises AmbiguousVerdict.
bool parse_correctness_reply(std::string_view reply);

/// POSTs `body` to base_url + path with the retry/backoff policy of `config`.
/// Connection failures, 408, 429 and 5xx are retried; exhaustion raises
/// RateLimited (last status 429) or GatewayTimeout naming the attempt count.
/// `attempts`, when given, is incremented once per HTTP attempt.
std::string post_with_retry(const GatewayConfig& config, const std::string& path,
                            const std::string& body, std::atomic<std::size_t>* attempts = nullptr);

/// Runs fn(i) for i in [0, n) on at most `max_parallel` threads. The first
/// exception (lowest index) is rethrown after all workers finish.
template <typename Fn>
void run_bounded(std::size_t n, int max_parallel, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, max_parallel)));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    loop();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

class GatewayClient {
 public:
  explicit GatewayClient(GatewayConfig config);

  const GatewayConfig& config() const { return config_; }

  std::vector<CompletionChoice> complete(const CompletionRequest& request) const;

  /// Greedy completion first (temperature 0), then decode.n_samples samples.
  GenerationSet sample_generations(const QARecord& record, const PromptTemplate& tmpl,
                                   const DecodeConfig& decode = {}) const;

  std::vector<GenerationSet> sample_many(const std::vector<QARecord>& records,
                                         const PromptTemplate& tmpl,
                                         const DecodeConfig& decode = {}) const;

  double p_true_score(const QARecord& record, const GenerationSet& gen_set,
                      const std::vector<PTrueBlock>& few_shot) const;

  EntailmentLabel judge_entailment(std::string_view answer_a, std::string_view answer_b) const;

  bool judge_correctness(const QARecord& record, std::string_view proposed) const;

  /// Number of HTTP attempts issued so far (including retries).
  std::size_t attempts() const { return attempts_.load(); }

 private:
  std::string judge_reply(const std::string& prompt) const;

  GatewayConfig config_;
  mutable std::atomic<std::size_t> attempts_{0};
};

}  // namespace semprobe
