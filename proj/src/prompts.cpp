#include "ehrnav/prompts.hpp"

#include <array>

#include "ehrnav/error.hpp"
#include "ehrnav/prompt_data.hpp"
#include "ehrnav/serialize.hpp"

namespace ehrnav {

namespace {

const std::array<Profile, 5>& profiles() {
  static const std::array<Profile, 5> kProfiles{{
      {"ehrsql", "ehrsql_sql", SqlReplyFormat::sqlquery_line, "SQLite", 10, 10},
      {"drugehrqa", "drugehrqa_sql", SqlReplyFormat::sqlquery_line, "SQLite", 10, 10},
      {"omop", "omop_sql", SqlReplyFormat::json_object, "SQLite", 10, 10},
      {"ehrnoteqa", "drugehrqa_sql", SqlReplyFormat::sqlquery_line, "SQLite", 10, 10},
      {"fixture", "drugehrqa_sql", SqlReplyFormat::sqlquery_line, "SQLite", 10, 10},
  }};
  return kProfiles;
}

}  // namespace

const Profile& builtin_profile(std::string_view name) {
  for (const auto& p : profiles()) {
    if (p.name == name) return p;
  }
  throw Error(ErrorCode::invalid_argument, "unknown profile: " + std::string(name));
}

bool is_known_profile(std::string_view name) {
  for (const auto& p : profiles()) {
    if (p.name == name) return true;
  }
  return false;
}

std::vector<std::string> profile_names() {
  std::vector<std::string> out;
  for (const auto& p : profiles()) out.push_back(p.name);
  return out;
}

PromptLibrary::PromptLibrary() {
  for (const auto& [name, body] : detail::kPromptData) {
    templates_.emplace(std::string(name), llm::PromptTemplate(std::string(name), std::string(body)));
  }
}

PromptLibrary::PromptLibrary(const std::filesystem::path& override_dir) : PromptLibrary() {
  for (auto& [name, tmpl] : templates_) {
    const auto file = override_dir / (name + ".txt");
    if (std::filesystem::exists(file)) tmpl = llm::PromptTemplate(name, read_file(file));
  }
}

const llm::PromptTemplate& PromptLibrary::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw Error(ErrorCode::config, "no prompt template named " + std::string(name));
  return it->second;
}

}  // namespace ehrnav
