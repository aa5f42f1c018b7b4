#include "semprobe/gateway.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "semprobe/error.hpp"
#include "semprobe/log.hpp"
#include "semprobe/text.hpp"

namespace semprobe {

std::string_view to_string(EntailmentLabel label) {
  switch (label) {
    case EntailmentLabel::ENTAILMENT: return "entailment";
    case EntailmentLabel::CONTRADICTION: return "contradiction";
    case EntailmentLabel::NEUTRAL: return "neutral";
  }
  return "neutral";
}

EntailmentLabel parse_entailment_label(std::string_view text) {
  const auto t = to_lower(trim(text));
  if (t == "entailment") return EntailmentLabel::ENTAILMENT;
  if (t == "contradiction") return EntailmentLabel::CONTRADICTION;
  if (t == "neutral") return EntailmentLabel::NEUTRAL;
  throw Error(ErrorCode::ParseError, "unknown entailment label '" + std::string(text) + "'");
}

void GatewayConfig::validate() const {
  if (max_parallel_requests < 1) throw Error(ErrorCode::BadConfig, "max_parallel_requests must be >= 1");
  if (!(timeout_seconds > 0.0)) throw Error(ErrorCode::BadConfig, "timeout must be > 0");
  if (max_retries < 0) throw Error(ErrorCode::BadConfig, "max_retries must be >= 0");
}

GatewayConfig& GatewayConfig::with_env_key() {
  if (const char* key = std::getenv("SEMPROBE_API_KEY")) api_key = key;
  return *this;
}

void from_json(const json& j, GatewayConfig& c) {
  const GatewayConfig d;
  c.base_url = j.value("base_url", d.base_url);
  c.model_name = j.value("model_name", d.model_name);
  c.timeout_seconds = j.value("timeout_seconds", d.timeout_seconds);
  c.max_retries = j.value("max_retries", d.max_retries);
  c.max_parallel_requests = j.value("max_parallel_requests", d.max_parallel_requests);
  c.chat = j.value("chat", d.chat);
  c.send_top_k = j.value("send_top_k", d.send_top_k);
  c.backoff_initial_seconds = j.value("backoff_initial_seconds", d.backoff_initial_seconds);
  c.backoff_max_seconds = j.value("backoff_max_seconds", d.backoff_max_seconds);
  c.short_form_max_tokens = j.value("short_form_max_tokens", d.short_form_max_tokens);
  c.long_form_max_tokens = j.value("long_form_max_tokens", d.long_form_max_tokens);
  c.judge_max_tokens = j.value("judge_max_tokens", d.judge_max_tokens);
  c.with_env_key();
  c.validate();
}

void to_json(json& j, const GatewayConfig& c) {
  j = json{{"base_url", c.base_url},
           {"model_name", c.model_name},
           {"timeout_seconds", c.timeout_seconds},
           {"max_retries", c.max_retries},
           {"max_parallel_requests", c.max_parallel_requests},
           {"chat", c.chat},
           {"send_top_k", c.send_top_k},
           {"backoff_initial_seconds", c.backoff_initial_seconds},
           {"backoff_max_seconds", c.backoff_max_seconds},
           {"short_form_max_tokens", c.short_form_max_tokens},
           {"long_form_max_tokens", c.long_form_max_tokens},
           {"judge_max_tokens", c.judge_max_tokens}};
}

std::string_view to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::SHORT_FORM: return "short";
    case TemplateKind::LONG_FORM: return "long";
    case TemplateKind::CONTEXT: return "context";
    case TemplateKind::PTRUE: return "ptrue";
    case TemplateKind::ENTAILMENT_JUDGE: return "entailment_judge";
    case TemplateKind::CORRECTNESS_JUDGE: return "correctness_judge";
  }
  return "short";
}

TemplateKind parse_template_kind(std::string_view text) {
  const auto t = to_lower(text);
  if (t == "short" || t == "short_form") return TemplateKind::SHORT_FORM;
  if (t == "long" || t == "long_form") return TemplateKind::LONG_FORM;
  if (t == "context") return TemplateKind::CONTEXT;
  if (t == "ptrue") return TemplateKind::PTRUE;
  if (t == "entailment_judge") return TemplateKind::ENTAILMENT_JUDGE;
  if (t == "correctness_judge") return TemplateKind::CORRECTNESS_JUDGE;
  throw Error(ErrorCode::ParseError, "unknown template '" + std::string(text) + "'");
}

// ---- prompts ---------------------------------------------------------------

namespace {

void require(bool ok, const std::string& slot) {
  if (!ok) throw Error(ErrorCode::MissingSlot, "template slot '" + slot + "' is empty");
}

std::string ptrue_body(std::string_view question, const std::vector<std::string>& brainstormed,
                       std::string_view possible) {
  std::string out = "Question: ";
  out += question;
  out += "\nBrainstormed Answers: ";
  for (std::size_t i = 0; i < brainstormed.size(); ++i) {
    if (i) out += '\n';
    out += brainstormed[i];
  }
  out += "\nPossible answer: ";
  out += possible;
  out += "\nIs the possible answer:\nA) True\nB) False\nThe possible answer is:";
  return out;
}

}  // namespace

std::string render_ptrue_block(const PTrueBlock& block) {
  return ptrue_body(block.question, block.brainstormed, block.possible_answer) +
         (block.is_true ? " A" : " B");
}

std::string render_entailment_prompt(std::string_view answer_a, std::string_view answer_b) {
  std::string out = "Here are two possible answers:\nPossible Answer 1: ";
  out += answer_a;
  out += "\nPossible Answer 2: ";
  out += answer_b;
  out += "\nDoes Possible Answer 1 semantically entail Possible Answer 2?\n"
         "Respond with entailment, contradiction, or neutral.";
  return out;
}

std::string render_prompt(const PromptTemplate& tmpl, const QARecord& record,
                          const PromptExtras& extras) {
  switch (tmpl.kind) {
    case TemplateKind::LONG_FORM:
      require(!record.question.empty(), "query question");
      return "Answer the following question in a single brief but complete sentence.\nQuestion: " +
             record.question + "\nAnswer:";

    case TemplateKind::SHORT_FORM: {
      require(!record.question.empty(), "query question");
      if (tmpl.few_shot.size() != kShortFormDemos)
        throw Error(ErrorCode::MissingSlot, "short-form prompt needs exactly 5 demonstrations, got " +
                                                std::to_string(tmpl.few_shot.size()));
      std::string out = "Answer the following question as briefly as possible.\n";
      for (const auto& ex : tmpl.few_shot) {
        require(!ex.question.empty(), "example question");
        require(!ex.answer.empty(), "example answer");
        out += "Question: " + ex.question + "\nAnswer:   " + ex.answer + "\n";
      }
      out += "Question: " + record.question + "\nAnswer:";
      return out;
    }

    case TemplateKind::CONTEXT:
      require(record.context.has_value() && !record.context->empty(), "query context");
      require(!record.question.empty(), "query question");
      return "Context: " + *record.context + "\nQuestion: " + record.question + "\nAnswer:";

    case TemplateKind::PTRUE: {
      if (tmpl.ptrue_blocks.size() != kPTrueBlocks)
        throw Error(ErrorCode::MissingSlot, "p(True) prompt needs exactly 10 blocks, got " +
                                                std::to_string(tmpl.ptrue_blocks.size()));
      require(!extras.brainstormed.empty(), "model generation");
      require(!extras.possible_answer.empty(), "greedy model generation");
      std::string out;
      for (const auto& block : tmpl.ptrue_blocks) out += render_ptrue_block(block) + "\n";
      out += ptrue_body(record.question, extras.brainstormed, extras.possible_answer);
      return out;
    }

    case TemplateKind::ENTAILMENT_JUDGE:
      require(!extras.answer_a.empty(), "model generation a");
      require(!extras.answer_b.empty(), "model generation b");
      return render_entailment_prompt(extras.answer_a, extras.answer_b);

    case TemplateKind::CORRECTNESS_JUDGE:
      require(!record.answers.empty() && !record.answers.front().empty(), "ground truth label");
      require(!extras.proposed.empty(), "model generation");
      return "We are assessing the quality of answers to the following question: " +
             record.question + "\nThe expected answer is: " + record.answers.front() +
             ".\nThe proposed answer is: " + extras.proposed +
             ".\nWithin the context of the question,\n"
             "does the proposed answer mean the same as the expected answer?\n"
             "Respond only with yes or no.\nResponse:";
  }
  throw Error(ErrorCode::MissingSlot, "unknown template kind");
}

// ---- wire format -----------------------------------------------------------

json build_request_body(const GatewayConfig& config, const CompletionRequest& request) {
  json body;
  body["model"] = config.model_name;
  if (config.chat)
    body["messages"] = json::array({json{{"role", "user"}, {"content", request.prompt}}});
  else
    body["prompt"] = request.prompt;
  body["temperature"] = request.temperature;
  if (request.top_p) body["top_p"] = *request.top_p;
  if (request.top_k && config.send_top_k) body["top_k"] = *request.top_k;
  body["max_tokens"] = request.max_tokens;
  body["n"] = request.n;
  if (!request.stop.empty()) body["stop"] = request.stop;
  if (request.want_logprobs) {
    if (config.chat) {
      body["logprobs"] = true;
      if (request.top_logprobs > 0) body["top_logprobs"] = request.top_logprobs;
    } else {
      // Completions API: integer top-k; 1 still returns sampled-token log-probs.
      body["logprobs"] = std::max(1, request.top_logprobs);
    }
  }
  return body;
}

namespace {

double checked_logprob(const json& v) {
  const double lp = v.get<double>();
  if (!std::isfinite(lp) && !(std::isinf(lp) && lp < 0))
    throw Error(ErrorCode::MalformedResponse, "non-finite log-probability");
  // Servers occasionally report tiny positive values from float round-off.
  if (lp > 0.0) {
    if (lp > 1e-6) throw Error(ErrorCode::MalformedResponse, "positive log-probability");
    return 0.0;
  }
  return lp;
}

CompletionChoice parse_choice_completions(const json& choice) {
  CompletionChoice out;
  out.text = choice.at("text").get<std::string>();
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || lp->is_null()) return out;
  if (auto t = lp->find("token_logprobs"); t != lp->end() && t->is_array()) {
    bool complete = true;
    std::vector<double> values;
    for (const auto& v : *t) {
      if (v.is_null()) {
        complete = false;
        break;
      }
      values.push_back(checked_logprob(v));
    }
    if (complete) out.token_log_probs = std::move(values);
  }
  if (auto top = lp->find("top_logprobs"); top != lp->end() && top->is_array()) {
    for (const auto& pos : *top) {
      std::map<std::string, double> entry;
      if (pos.is_object())
        for (auto it = pos.begin(); it != pos.end(); ++it) entry[it.key()] = checked_logprob(it.value());
      out.top_log_probs.push_back(std::move(entry));
    }
  }
  return out;
}

CompletionChoice parse_choice_chat(const json& choice) {
  CompletionChoice out;
  const auto& message = choice.at("message");
  if (auto c = message.find("content"); c != message.end() && !c->is_null())
    out.text = c->get<std::string>();
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || lp->is_null()) return out;
  const auto content = lp->find("content");
  if (content == lp->end() || !content->is_array()) return out;
  for (const auto& tok : *content) {
    out.token_log_probs.push_back(checked_logprob(tok.at("logprob")));
    std::map<std::string, double> entry;
    if (auto top = tok.find("top_logprobs"); top != tok.end() && top->is_array())
      for (const auto& alt : *top) entry[alt.at("token").get<std::string>()] = checked_logprob(alt.at("logprob"));
    out.top_log_probs.push_back(std::move(entry));
  }
  return out;
}

}  // namespace

std::vector<CompletionChoice> parse_completion_response(const json& body, bool chat) {
  try {
    const auto& choices = body.at("choices");
    if (!choices.is_array()) throw Error(ErrorCode::MalformedResponse, "'choices' is not an array");
    std::vector<std::pair<std::size_t, CompletionChoice>> indexed;
    for (std::size_t i = 0; i < choices.size(); ++i) {
      const auto& c = choices[i];
      const std::size_t index = c.value("index", i);
      indexed.emplace_back(index, chat ? parse_choice_chat(c) : parse_choice_completions(c));
    }
    std::stable_sort(indexed.begin(), indexed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<CompletionChoice> out;
    for (auto& [i, c] : indexed) out.push_back(std::move(c));
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedResponse, e.what());
  }
}

double p_true_from_top_logprobs(const std::map<std::string, double>& top) {
  double mass = 0.0;
  for (const auto& [token, lp] : top)
    if (trim(token) == "A") mass += std::exp(lp);
  if (mass == 0.0) warn("p(True): no 'A' token among the returned top log-probs; scoring 0");
  return std::clamp(mass, 0.0, 1.0);
}

EntailmentLabel parse_entailment_reply(std::string_view reply, bool* matched) {
  const auto lower = to_lower(reply);
  const std::pair<const char*, EntailmentLabel> keywords[] = {
      {"entailment", EntailmentLabel::ENTAILMENT},
      {"contradiction", EntailmentLabel::CONTRADICTION},
      {"neutral", EntailmentLabel::NEUTRAL}};
  std::size_t best = std::string::npos;
  EntailmentLabel label = EntailmentLabel::NEUTRAL;
  for (const auto& [word, value] : keywords) {
    const auto pos = lower.find(word);
    if (pos < best) {
      best = pos;
      label = value;
    }
  }
  if (matched) *matched = best != std::string::npos;
  return label;
}

bool parse_correctness_reply(std::string_view reply) {
  const auto words = normalized_tokens(reply);
  if (!words.empty()) {
    if (words.front() == "yes") return true;
    if (words.front() == "no") return false;
  }
  bool yes = false, no = false;
  for (const auto& w : words) {
    yes |= w == "yes";
    no |= w == "no";
  }
  if (yes && !no) return true;
  if (no && !yes) return false;
  throw Error(ErrorCode::AmbiguousVerdict, "judge reply '" + std::string(reply) + "'");
}

// ---- client ----------------------------------------------------------------

GatewayClient::GatewayClient(GatewayConfig config) : config_(std::move(config)) {
  config_.validate();
}

std::string post_with_retry(const GatewayConfig& config, const std::string& path,
                            const std::string& body, std::atomic<std::size_t>* attempts) {
  // httplib wants scheme://host[:port]; anything after that is a path prefix.
  const auto scheme_end = config.base_url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = config.base_url.find('/', host_start);
  const auto scheme_host_port = config.base_url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : config.base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  httplib::Client client(scheme_host_port);
  const auto secs = static_cast<time_t>(config.timeout_seconds);
  const auto usecs = static_cast<time_t>((config.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!config.api_key.empty()) headers.emplace("Authorization", "Bearer " + config.api_key);

  const int attempts_allowed = config.max_retries + 1;
  int last_status = 0;
  std::string last_detail;
  for (int attempt = 0; attempt < attempts_allowed; ++attempt) {
    if (attempt > 0) {
      const double delay = std::min(config.backoff_max_seconds,
                                    config.backoff_initial_seconds * std::pow(2.0, attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    if (attempts) ++*attempts;
    auto res = client.Post(prefix + path, headers, body, "application/json");
    if (!res) {
      last_status = 0;
      last_detail = httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 200 && res->status < 300) return res->body;
    last_status = res->status;
    last_detail = "HTTP " + std::to_string(res->status);
    const bool transient = res->status == 408 || res->status == 429 || res->status >= 500;
    if (!transient)
      throw Error(ErrorCode::MalformedResponse, last_detail + ": " + res->body.substr(0, 200));
  }
  const auto what = last_detail + " after " + std::to_string(attempts_allowed) + " attempts";
  if (last_status == 429) throw Error(ErrorCode::RateLimited, what);
  throw Error(ErrorCode::GatewayTimeout, what);
}

std::vector<CompletionChoice> GatewayClient::complete(const CompletionRequest& request) const {
  const auto body = build_request_body(config_, request).dump();
  const auto raw = post_with_retry(config_, config_.chat ? "/v1/chat/completions" : "/v1/completions", body,
                                   &attempts_);
  json parsed;
  try {
    parsed = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedResponse, e.what());
  }
  return parse_completion_response(parsed, config_.chat);
}

namespace {

GenerationSample to_sample(CompletionChoice choice, double temperature) {
  GenerationSample s;
  s.text = trim(choice.text);
  s.token_log_probs = std::move(choice.token_log_probs);
  s.temperature = temperature;
  return s;
}

}  // namespace

GenerationSet GatewayClient::sample_generations(const QARecord& record, const PromptTemplate& tmpl,
                                                const DecodeConfig& decode) const {
  if (decode.n_samples < 0) throw Error(ErrorCode::BadConfig, "n_samples must be >= 0");
  CompletionRequest base;
  base.prompt = render_prompt(tmpl, record);
  if (tmpl.kind == TemplateKind::LONG_FORM) {
    base.max_tokens = config_.long_form_max_tokens;
  } else {
    base.max_tokens = config_.short_form_max_tokens;
    base.stop = {"\n"};
  }

  GenerationSet set;
  set.id = record.id;
  set.decode_config = decode;

  auto greedy_req = base;
  greedy_req.temperature = 0.0;
  auto greedy = complete(greedy_req);
  if (greedy.empty()) throw Error(ErrorCode::MalformedResponse, "no choices for greedy request");
  set.greedy = to_sample(std::move(greedy.front()), 0.0);

  auto sample_req = base;
  sample_req.temperature = decode.temperature;
  sample_req.top_p = decode.top_p;
  sample_req.top_k = decode.top_k;
  const auto wanted = static_cast<std::size_t>(decode.n_samples);
  // Servers may cap n; ask again only for the shortfall.
  while (set.samples.size() < wanted) {
    sample_req.n = static_cast<int>(wanted - set.samples.size());
    auto choices = complete(sample_req);
    if (choices.empty()) throw Error(ErrorCode::MalformedResponse, "server returned no samples");
    for (auto& c : choices) {
      if (set.samples.size() == wanted) break;
      set.samples.push_back(to_sample(std::move(c), decode.temperature));
    }
  }
  return set;
}

std::vector<GenerationSet> GatewayClient::sample_many(const std::vector<QARecord>& records,
                                                      const PromptTemplate& tmpl,
                                                      const DecodeConfig& decode) const {
  std::vector<GenerationSet> out(records.size());
  run_bounded(records.size(), config_.max_parallel_requests,
              [&](std::size_t i) { out[i] = sample_generations(records[i], tmpl, decode); });
  return out;
}

double GatewayClient::p_true_score(const QARecord& record, const GenerationSet& gen_set,
                                   const std::vector<PTrueBlock>& few_shot) const {
  PromptTemplate tmpl{TemplateKind::PTRUE, {}, few_shot};
  PromptExtras extras;
  for (const auto& s : gen_set.samples) extras.brainstormed.push_back(s.text);
  extras.possible_answer = gen_set.greedy.text;

  CompletionRequest req;
  req.prompt = render_prompt(tmpl, record, extras);
  req.temperature = 0.0;
  req.max_tokens = 1;
  req.top_logprobs = 20;
  auto choices = complete(req);
  if (choices.empty() || choices.front().top_log_probs.empty() ||
      choices.front().top_log_probs.front().empty())
    throw Error(ErrorCode::NoLogProbs, "endpoint returned no top log-probs for p(True)");
  return p_true_from_top_logprobs(choices.front().top_log_probs.front());
}

std::string GatewayClient::judge_reply(const std::string& prompt) const {
  CompletionRequest req;
  req.prompt = prompt;
  req.temperature = 0.0;
  req.max_tokens = config_.judge_max_tokens;
  req.want_logprobs = false;
  auto choices = complete(req);
  if (choices.empty()) throw Error(ErrorCode::MalformedResponse, "judge returned no choices");
  return choices.front().text;
}

EntailmentLabel GatewayClient::judge_entailment(std::string_view answer_a,
                                                std::string_view answer_b) const {
  const auto reply = judge_reply(render_entailment_prompt(answer_a, answer_b));
  bool matched = false;
  const auto label = parse_entailment_reply(reply, &matched);
  if (!matched) warn("entailment judge reply '" + reply + "' has no label keyword; using neutral");
  return label;
}

bool GatewayClient::judge_correctness(const QARecord& record, std::string_view proposed) const {
  PromptExtras extras;
  extras.proposed = std::string(proposed);
  return parse_correctness_reply(
      judge_reply(render_prompt({TemplateKind::CORRECTNESS_JUDGE, {}, {}}, record, extras)));
}

}  // namespace semprobe
