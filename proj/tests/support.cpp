#include "support.hpp"

#include <cstdlib>
#include <fstream>

#include <sqlite3.h>

#include "ehrnav/serialize.hpp"

namespace ehrnav::testing {

std::filesystem::path source_dir() { return EHRNAV_SOURCE_DIR; }
std::filesystem::path fixture(const std::string& name) { return source_dir() / "fixtures" / name; }
std::filesystem::path fixture_db(const std::string& name) {
  return std::filesystem::path(EHRNAV_FIXTURE_DB_DIR) / (name + ".db");
}
std::filesystem::path test_data(const std::string& name) { return source_dir() / "tests" / "data" / name; }
std::filesystem::path golden(const std::string& name) { return source_dir() / "tests" / "golden" / name; }
std::filesystem::path cli_path() { return EHRNAV_CLI_PATH; }

std::string check_golden(const std::string& name, const std::string& actual) {
  const auto path = golden(name);
  const char* update = std::getenv("EHRNAV_UPDATE_GOLDENS");
  if (update && std::string(update) == "1") {
    write_file(path, actual);
    return {};
  }
  if (!std::filesystem::exists(path)) return "golden file missing: " + path.string();
  const std::string expected = read_file(path);
  if (expected == actual) return {};
  std::size_t i = 0;
  while (i < expected.size() && i < actual.size() && expected[i] == actual[i]) ++i;
  const auto from = i < 40 ? 0 : i - 40;
  return "golden " + name + " differs at byte " + std::to_string(i) + "\nexpected: ..." +
         expected.substr(from, 120) + "\nactual:   ..." + actual.substr(from, 120);
}

TempDir::TempDir() {
  std::random_device rd;
  path_ = std::filesystem::temp_directory_path() /
          ("ehrnav-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

llm::ScriptRule rule(llm::RoleTag role, std::vector<std::string> patterns, std::string reply, double latency_ms) {
  llm::ScriptRule r;
  r.role_tag = role;
  r.patterns = std::move(patterns);
  r.reply = std::move(reply);
  r.latency_ms = latency_ms;
  return r;
}

std::vector<llm::ScriptRule> reviewer_rules() {
  using llm::RoleTag;
  return {
      rule(RoleTag::table_reviewer, {"Table Name: patients\n"}, "Patient demographics."),
      rule(RoleTag::table_reviewer, {"Table Name: admissions\n"}, "Hospital admissions with times and locations."),
      rule(RoleTag::table_reviewer, {"Table Name: prescriptions\n"}, "Medication orders with drug, dose and route."),
      rule(RoleTag::table_reviewer, {"Table Name: labevents\n"}, "Laboratory results with label, value and unit."),
  };
}

NavigatorParts make_navigator(std::vector<llm::ScriptRule> rules, const std::filesystem::path& db,
                              PipelineConfig config, const std::string& db_id,
                              std::optional<std::filesystem::path> notes) {
  NavigatorParts p;
  p.gateway = std::make_shared<llm::Gateway>(std::make_shared<llm::ScriptedBackend>(std::move(rules)));
  p.embedder = std::make_shared<embed::Embedder>(std::make_shared<embed::HashEmbedding>());
  p.descriptions = std::make_shared<structured::DescriptionCache>();
  Navigator::Components c;
  c.gateway = p.gateway;
  c.embedder = p.embedder;
  c.descriptions = p.descriptions;
  c.corpus = std::make_shared<notes::NoteCorpus>(notes::NoteCorpus::load(notes.value_or(fixture("notes.jsonl"))));
  p.navigator = std::make_unique<Navigator>(std::move(c), std::move(config));
  p.navigator->add_database(DatabaseEntry{db_id, sql::Database::open(db, db_id), "fixture",
                                          "SELECT 1 FROM patients WHERE subject_id = :patient_id"});
  return p;
}

void exec_writable(const std::filesystem::path& db, const std::string& sql) {
  sqlite3* h = nullptr;
  if (sqlite3_open(db.c_str(), &h) != SQLITE_OK) throw std::runtime_error("cannot open " + db.string());
  char* err = nullptr;
  const int rc = sqlite3_exec(h, sql.c_str(), nullptr, nullptr, &err);
  std::string msg = err ? err : "";
  sqlite3_free(err);
  sqlite3_close(h);
  if (rc != SQLITE_OK) throw std::runtime_error(msg);
}

std::mt19937_64 rng(std::uint64_t salt) {
  std::uint64_t seed = 20240611;
  if (const char* s = std::getenv("EHRNAV_SEED")) seed = std::strtoull(s, nullptr, 10);
  return std::mt19937_64(seed ^ (salt * 0x9E3779B97F4A7C15ULL));
}

}  // namespace ehrnav::testing
