#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ehrnav/trace.hpp"

namespace ehrnav::llm {

enum class RoleTag { table_reviewer, sql_writer, answer_synthesizer, note_qa };
inline constexpr std::size_t kRoleCount = 4;

std::string to_string(RoleTag r);
RoleTag parse_role(std::string_view s);

struct ChatRequest {
  RoleTag role_tag = RoleTag::sql_writer;
  std::string rendered_prompt;
  double temperature = 0.0;
  int max_output_tokens = 1024;
};

struct ChatResponse {
  std::string text;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  double latency_ms = 0.0;
  double cost = 0.0;
};

using Bindings = std::map<std::string, std::string>;

/// Text with `{name}` placeholders. Only identifier-shaped names count, so
/// literal braces (e.g. JSON examples in a prompt) are left alone.
class PromptTemplate {
 public:
  PromptTemplate(std::string name, std::string text);

  const std::string& name() const { return name_; }
  const std::string& text() const { return text_; }
  const std::set<std::string>& required_placeholders() const { return required_; }

 private:
  std::string name_;
  std::string text_;
  std::set<std::string> required_;
};

/// Substitutes every placeholder verbatim in a single pass. Throws
/// Error(missing_placeholder) listing all unbound names.
std::string render(const PromptTemplate& tmpl, const Bindings& bindings);

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string id() const = 0;
  /// `clock` is the caller's time source; backends that simulate latency
  /// advance it rather than sleeping on the wall clock.
  virtual ChatResponse complete(const ChatRequest& request, Clock& clock) = 0;
};

struct ScriptRule {
  RoleTag role_tag = RoleTag::sql_writer;
  /// All substrings must occur in the rendered prompt. Empty matches anything.
  std::vector<std::string> patterns;
  std::string reply;
  double latency_ms = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::optional<double> cost;
  /// Remaining uses; unset means unlimited.
  std::optional<int> times;
};

/// Deterministic backend driven by an ordered rule list. The first rule whose
/// role and patterns match (and which has uses left) answers the request.
class ScriptedBackend final : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<ScriptRule> rules, double cost_per_1k_tokens = 0.0);

  /// Script file: a JSON array of rules, or JSON lines with one rule each.
  /// Rule keys: role_tag, match (string or array), reply, latency_ms,
  /// tokens {prompt, completion}, cost, times.
  static std::vector<ScriptRule> load_rules(const std::filesystem::path& path);

  std::string id() const override { return "scripted"; }
  ChatResponse complete(const ChatRequest& request, Clock& clock) override;

 private:
  std::mutex mu_;
  std::vector<ScriptRule> rules_;
  double cost_per_1k_;
};

struct RemoteChatConfig {
  std::string endpoint;  // base URL, e.g. https://host/v1
  std::string api_key_env;
  std::string model;
  double cost_per_1k_tokens = 0.0;
  double timeout_s = 120.0;
};

/// Chat-completions HTTP contract: POST {endpoint}/chat/completions with a
/// single user message; reads choices[0].message.content and usage.
class RemoteChatBackend final : public ChatBackend {
 public:
  explicit RemoteChatBackend(RemoteChatConfig config);
  std::string id() const override { return "remote:" + config_.model; }
  ChatResponse complete(const ChatRequest& request, Clock& clock) override;

 private:
  RemoteChatConfig config_;
};

struct GatewayOptions {
  int transport_retries = 0;
  /// Only an explicitly experimental configuration may use temperature != 0.
  bool experimental_temperature = false;
};

/// Accounting front for a backend: counts calls per role and writes one trace
/// step per call.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options = {});

  ChatResponse complete(const ChatRequest& request, RunContext& ctx);

  std::int64_t call_count(RoleTag role) const;
  void reset_counts();
  const ChatBackend& backend() const { return *backend_; }

 private:
  std::shared_ptr<ChatBackend> backend_;
  GatewayOptions options_;
  std::array<std::atomic<std::int64_t>, kRoleCount> counts_{};
};

}  // namespace ehrnav::llm
