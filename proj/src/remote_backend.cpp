// HTTP clients for the remote chat-completion and embedding backends.

#include <httplib.h>

#include <cstdlib>

#include "ehrnav/embedding.hpp"
#include "ehrnav/error.hpp"
#include "ehrnav/llm.hpp"
#include "ehrnav/serialize.hpp"

namespace ehrnav {

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string base_path;
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::config, "endpoint must include a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  Endpoint e;
  e.origin = url.substr(0, path_start);
  e.base_path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!e.base_path.empty() && e.base_path.back() == '/') e.base_path.pop_back();
  return e;
}

std::string api_key(const std::string& env_name) {
  if (env_name.empty()) return {};
  const char* v = std::getenv(env_name.c_str());
  return v ? std::string(v) : std::string{};
}

Json post_json(const std::string& url, const std::string& path, const std::string& key_env, double timeout_s,
               const Json& body) {
  const Endpoint ep = split_endpoint(url);
  httplib::Client client(ep.origin);
  const auto secs = static_cast<time_t>(timeout_s);
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);
  httplib::Headers headers;
  if (const std::string key = api_key(key_env); !key.empty()) {
    headers.emplace("Authorization", "Bearer " + key);
  }
  auto res = client.Post(ep.base_path + path, headers, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::backend_transport,
                "request to " + ep.origin + ep.base_path + path + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error(ErrorCode::backend_transport,
                "backend returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 500));
  }
  try {
    return Json::parse(res->body);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::backend_transport, std::string("backend returned invalid JSON: ") + e.what());
  }
}

}  // namespace

namespace llm {

RemoteChatBackend::RemoteChatBackend(RemoteChatConfig config) : config_(std::move(config)) {
  split_endpoint(config_.endpoint);
  if (config_.model.empty()) throw Error(ErrorCode::config, "remote chat backend needs a model identifier");
}

ChatResponse RemoteChatBackend::complete(const ChatRequest& request, Clock& clock) {
  const Json body{{"model", config_.model},
                  {"messages", Json::array({Json{{"role", "user"}, {"content", request.rendered_prompt}}})},
                  {"temperature", request.temperature},
                  {"max_tokens", request.max_output_tokens},
                  {"stream", false}};
  StepTimer timer(clock);
  const Json reply = post_json(config_.endpoint, "/chat/completions", config_.api_key_env, config_.timeout_s, body);
  ChatResponse r;
  try {
    r.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    if (auto usage = reply.find("usage"); usage != reply.end() && usage->is_object()) {
      r.prompt_tokens = usage->value("prompt_tokens", std::int64_t{0});
      r.completion_tokens = usage->value("completion_tokens", std::int64_t{0});
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::backend_transport, std::string("unexpected chat response shape: ") + e.what());
  }
  r.latency_ms = timer.elapsed_ms();
  r.cost = static_cast<double>(r.prompt_tokens + r.completion_tokens) / 1000.0 * config_.cost_per_1k_tokens;
  return r;
}

}  // namespace llm

namespace embed {

std::vector<Vector> RemoteEmbedding::embed_batch(const std::vector<std::string>& texts) {
  const Json body{{"model", config_.model}, {"input", texts}};
  const Json reply = post_json(config_.endpoint, "/embeddings", config_.api_key_env, config_.timeout_s, body);
  std::vector<Vector> out(texts.size());
  try {
    const Json& data = reply.at("data");
    if (data.size() != texts.size()) {
      throw Error(ErrorCode::backend_transport, "embedding response has wrong item count");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t at = data[i].value("index", i);
      if (at >= out.size()) throw Error(ErrorCode::backend_transport, "embedding response index out of range");
      out[at] = data[i].at("embedding").get<Vector>();
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::backend_transport, std::string("unexpected embedding response shape: ") + e.what());
  }
  return out;
}

}  // namespace embed

}  // namespace ehrnav
