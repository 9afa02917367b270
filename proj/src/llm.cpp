#include "ehrnav/llm.hpp"

#include <cctype>

#include "ehrnav/error.hpp"
#include "ehrnav/serialize.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::llm {

std::string to_string(RoleTag r) {
  switch (r) {
    case RoleTag::table_reviewer: return "table_reviewer";
    case RoleTag::sql_writer: return "sql_writer";
    case RoleTag::answer_synthesizer: return "answer_synthesizer";
    case RoleTag::note_qa: return "note_qa";
  }
  return "unknown";
}

RoleTag parse_role(std::string_view s) {
  if (s == "table_reviewer") return RoleTag::table_reviewer;
  if (s == "sql_writer") return RoleTag::sql_writer;
  if (s == "answer_synthesizer") return RoleTag::answer_synthesizer;
  if (s == "note_qa") return RoleTag::note_qa;
  throw Error(ErrorCode::invalid_argument, "unknown role tag: " + std::string(s));
}

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Calls on_text for literal runs and on_placeholder for each `{name}`.
template <typename OnText, typename OnPlaceholder>
void scan_template(const std::string& t, OnText on_text, OnPlaceholder on_placeholder) {
  std::size_t literal_start = 0;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] == '{' && i + 1 < t.size() && ident_start(t[i + 1])) {
      std::size_t j = i + 1;
      while (j < t.size() && ident_char(t[j])) ++j;
      if (j < t.size() && t[j] == '}') {
        on_text(std::string_view(t).substr(literal_start, i - literal_start));
        on_placeholder(t.substr(i + 1, j - i - 1));
        i = j + 1;
        literal_start = i;
        continue;
      }
    }
    ++i;
  }
  on_text(std::string_view(t).substr(literal_start));
}

}  // namespace

PromptTemplate::PromptTemplate(std::string name, std::string text)
    : name_(std::move(name)), text_(std::move(text)) {
  scan_template(text_, [](std::string_view) {}, [this](const std::string& p) { required_.insert(p); });
}

std::string render(const PromptTemplate& tmpl, const Bindings& bindings) {
  std::vector<std::string> missing;
  for (const auto& name : tmpl.required_placeholders()) {
    if (!bindings.contains(name)) missing.push_back(name);
  }
  if (!missing.empty()) {
    throw Error(ErrorCode::missing_placeholder,
                "template '" + tmpl.name() + "' has unbound placeholders: " + text::join(missing, ", "));
  }
  std::string out;
  out.reserve(tmpl.text().size());
  scan_template(
      tmpl.text(), [&](std::string_view lit) { out += lit; },
      [&](const std::string& p) { out += bindings.at(p); });
  return out;
}

ScriptedBackend::ScriptedBackend(std::vector<ScriptRule> rules, double cost_per_1k_tokens)
    : rules_(std::move(rules)), cost_per_1k_(cost_per_1k_tokens) {}

namespace {

ScriptRule rule_from_json(const Json& j) {
  ScriptRule r;
  r.role_tag = parse_role(j.at("role_tag").get<std::string>());
  if (auto m = j.find("match"); m != j.end()) {
    if (m->is_string()) r.patterns.push_back(m->get<std::string>());
    else r.patterns = m->get<std::vector<std::string>>();
  }
  r.reply = j.at("reply").get<std::string>();
  r.latency_ms = j.value("latency_ms", 0.0);
  if (auto t = j.find("tokens"); t != j.end()) {
    r.prompt_tokens = t->value("prompt", std::int64_t{0});
    r.completion_tokens = t->value("completion", std::int64_t{0});
  }
  if (auto c = j.find("cost"); c != j.end() && !c->is_null()) r.cost = c->get<double>();
  if (auto t = j.find("times"); t != j.end() && !t->is_null()) r.times = t->get<int>();
  return r;
}

}  // namespace

std::vector<ScriptRule> ScriptedBackend::load_rules(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  std::vector<ScriptRule> rules;
  const auto first = content.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && content[first] == '[') {
      for (const auto& j : Json::parse(content)) rules.push_back(rule_from_json(j));
    } else {
      for (const auto& j : read_jsonl(path)) rules.push_back(rule_from_json(j));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, "invalid script file " + path.string() + ": " + e.what());
  }
  return rules;
}

ChatResponse ScriptedBackend::complete(const ChatRequest& request, Clock& clock) {
  ChatResponse response;
  {
    std::lock_guard lock(mu_);
    ScriptRule* hit = nullptr;
    for (auto& rule : rules_) {
      if (rule.role_tag != request.role_tag) continue;
      if (rule.times && *rule.times <= 0) continue;
      bool all = true;
      for (const auto& p : rule.patterns) {
        if (request.rendered_prompt.find(p) == std::string::npos) {
          all = false;
          break;
        }
      }
      if (all) {
        hit = &rule;
        break;
      }
    }
    if (hit == nullptr) {
      throw Error(ErrorCode::script_exhausted,
                  "no script rule matches role " + to_string(request.role_tag));
    }
    if (hit->times) --*hit->times;
    response.text = hit->reply;
    response.latency_ms = hit->latency_ms;
    response.prompt_tokens = hit->prompt_tokens;
    response.completion_tokens = hit->completion_tokens;
    response.cost = hit->cost.value_or(
        static_cast<double>(hit->prompt_tokens + hit->completion_tokens) / 1000.0 * cost_per_1k_);
  }
  clock.sleep_for(response.latency_ms);
  return response;
}

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions options)
    : backend_(std::move(backend)), options_(options) {
  if (!backend_) throw Error(ErrorCode::config, "gateway requires a backend");
}

ChatResponse Gateway::complete(const ChatRequest& request, RunContext& ctx) {
  if (request.temperature != 0.0 && !options_.experimental_temperature) {
    throw Error(ErrorCode::invalid_argument,
                "temperature must be 0 outside experimental mode");
  }
  counts_[static_cast<std::size_t>(request.role_tag)].fetch_add(1);

  TraceStep step;
  step.agent = to_string(request.role_tag);
  step.tool = "llm:" + backend_->id();
  step.input_digest = text::digest(request.rendered_prompt);

  StepTimer timer(ctx.clock);
  for (int attempt = 0;; ++attempt) {
    try {
      ChatResponse r = backend_->complete(request, ctx.clock);
      step.output_digest = text::digest(r.text);
      step.wall_ms = timer.elapsed_ms();
      step.prompt_tokens = r.prompt_tokens;
      step.completion_tokens = r.completion_tokens;
      step.cost = r.cost;
      ctx.trace.add(std::move(step));
      return r;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::backend_transport && attempt < options_.transport_retries) continue;
      step.wall_ms = timer.elapsed_ms();
      step.note = "error:" + std::string(ehrnav::to_string(e.code()));
      ctx.trace.add(std::move(step));
      throw;
    }
  }
}

std::int64_t Gateway::call_count(RoleTag role) const {
  return counts_[static_cast<std::size_t>(role)].load();
}

void Gateway::reset_counts() {
  for (auto& c : counts_) c.store(0);
}

}  // namespace ehrnav::llm
