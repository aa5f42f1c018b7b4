#pragma once

// In-process HTTP server standing in for an OpenAI-compatible endpoint.

#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace mock {

using json = nlohmann::json;

struct Reply {
  int status = 200;
  json body;
};

class Server {
 public:
  using Handler = std::function<Reply(const std::string& path, const json& request, std::size_t call)>;

  explicit Server(Handler handler) : handler_(std::move(handler)) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      std::size_t call;
      json parsed = json::parse(req.body, nullptr, false);
      {
        std::lock_guard lock(mutex_);
        call = requests_.size();
        requests_.push_back(parsed);
        paths_.push_back(req.path);
        auth_.push_back(req.get_header_value("Authorization"));
      }
      const auto reply = handler_(req.path, parsed, call);
      res.status = reply.status;
      res.set_content(reply.body.dump(), "application/json");
    };
    server_.Post(R"(/.*)", route);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~Server() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::vector<json> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }
  std::vector<std::string> paths() const {
    std::lock_guard lock(mutex_);
    return paths_;
  }
  std::vector<std::string> auth_headers() const {
    std::lock_guard lock(mutex_);
    return auth_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mutex_;
  std::vector<json> requests_;
  std::vector<std::string> paths_;
  std::vector<std::string> auth_;
};

/// Completions-API body with one choice per text, each token logprob -0.1.
inline json completions(const std::vector<std::string>& texts) {
  json choices = json::array();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    json lps = json::array();
    std::size_t tokens = 1;
    for (char c : texts[i]) tokens += c == ' ';
    for (std::size_t t = 0; t < tokens; ++t) lps.push_back(-0.1);
    choices.push_back({{"index", i}, {"text", texts[i]}, {"logprobs", {{"token_logprobs", lps}}}});
  }
  return {{"choices", choices}};
}

/// One-token completion carrying a top-log-prob map (probabilities given).
inline json top_tokens(const std::vector<std::pair<std::string, double>>& probs) {
  json top = json::object();
  for (const auto& [tok, p] : probs) top[tok] = std::log(p);
  return {{"choices",
           json::array({{{"index", 0},
                         {"text", probs.empty() ? "" : probs.front().first},
                         {"logprobs", {{"token_logprobs", {-0.1}}, {"top_logprobs", json::array({top})}}}}})}};
}

}  // namespace mock
