#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "ehrnav/llm.hpp"
#include "ehrnav/navigator.hpp"
#include "ehrnav/trace.hpp"

namespace ehrnav::testing {

std::filesystem::path source_dir();
std::filesystem::path fixture(const std::string& name);     // fixtures/<name>
std::filesystem::path fixture_db(const std::string& name);  // built <name>.db
std::filesystem::path test_data(const std::string& name);   // tests/data/<name>
std::filesystem::path golden(const std::string& name);      // tests/golden/<name>
std::filesystem::path cli_path();

/// Compares against a committed golden file; with EHRNAV_UPDATE_GOLDENS=1
/// the file is rewritten instead. Returns a diff hint on mismatch, empty on match.
std::string check_golden(const std::string& name, const std::string& actual);

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Fresh virtual clock and trace for one run.
struct Ctx {
  VirtualClock clock;
  TraceRecorder trace{"test", "q", clock};
  RunContext ctx{clock, trace};
};

llm::ScriptRule rule(llm::RoleTag role, std::vector<std::string> patterns, std::string reply, double latency_ms = 0.0);

/// Replies for the four fixture tables.
std::vector<llm::ScriptRule> reviewer_rules();

struct NavigatorParts {
  std::unique_ptr<Navigator> navigator;
  std::shared_ptr<llm::Gateway> gateway;
  std::shared_ptr<embed::Embedder> embedder;
  std::shared_ptr<structured::DescriptionCache> descriptions;
};

/// Navigator over one database ("fixture" profile) with a scripted backend,
/// the hash embedding and the fixture notes.
NavigatorParts make_navigator(std::vector<llm::ScriptRule> rules, const std::filesystem::path& db,
                              PipelineConfig config = {}, const std::string& db_id = "mimic_demo",
                              std::optional<std::filesystem::path> notes = std::nullopt);

/// Runs a script against a database opened read-write (test setup only).
void exec_writable(const std::filesystem::path& db, const std::string& sql);

/// Seeded generator shared by property tests; EHRNAV_SEED overrides the seed.
std::mt19937_64 rng(std::uint64_t salt = 0);

}  // namespace ehrnav::testing
