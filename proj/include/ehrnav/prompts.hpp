#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ehrnav/llm.hpp"

namespace ehrnav {

/// How the SQL writer's reply is expected to carry the statement.
enum class SqlReplyFormat { sqlquery_line, fenced_block, json_object };

/// Dataset profile: selects the SQL-writer prompt and reply format. Each
/// profile's k values are independent configuration.
struct Profile {
  std::string name;
  std::string sql_template;
  SqlReplyFormat reply_format = SqlReplyFormat::sqlquery_line;
  std::string dialect = "SQLite";
  std::size_t table_k = 10;
  std::size_t note_k = 10;
};

/// Known profiles: ehrsql, drugehrqa, omop, ehrnoteqa, fixture.
const Profile& builtin_profile(std::string_view name);
bool is_known_profile(std::string_view name);
std::vector<std::string> profile_names();

/// The six shipped templates, with optional per-file overrides from a
/// directory holding `<name>.txt`.
class PromptLibrary {
 public:
  PromptLibrary();
  explicit PromptLibrary(const std::filesystem::path& override_dir);

  const llm::PromptTemplate& get(std::string_view name) const;

 private:
  std::map<std::string, llm::PromptTemplate, std::less<>> templates_;
};

}  // namespace ehrnav
