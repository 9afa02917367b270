#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

#include "ehrnav/embedding.hpp"
#include "ehrnav/llm.hpp"
#include "ehrnav/model.hpp"
#include "ehrnav/prompts.hpp"
#include "ehrnav/sql.hpp"
#include "ehrnav/trace.hpp"

namespace ehrnav::structured {

struct SchemaCatalog {
  std::string db_id;
  Instant discovered_at;
  std::vector<TableRef> tables;

  const TableRef* find(std::string_view name) const;
};

SchemaCatalog discover_schema(const sql::Database& db);

struct TableSample {
  std::string table;
  std::vector<std::string> columns;
  std::optional<std::vector<Value>> sample_row;
};

TableSample sample_table(const sql::Database& db, std::string_view table);

/// Sample row as `col=value` pairs joined by "; ", each value cut at 120 chars.
std::string render_sample_row(const TableSample& sample);

/// Table descriptions keyed by (db id, table name, schema fingerprint). When
/// constructed with a path, entries are loaded from and appended to that
/// JSON-lines file.
class DescriptionCache {
 public:
  DescriptionCache() = default;
  explicit DescriptionCache(std::filesystem::path file);

  std::optional<TableDescription> lookup(const std::string& db_id, const std::string& table,
                                         const std::string& fingerprint) const;
  /// Latest description for the table regardless of fingerprint.
  std::optional<TableDescription> latest(const std::string& db_id, const std::string& table) const;
  void store(const std::string& db_id, const TableDescription& description);

 private:
  mutable std::shared_mutex mu_;
  std::optional<std::filesystem::path> file_;
  std::map<std::tuple<std::string, std::string, std::string>, TableDescription> entries_;
  std::map<std::pair<std::string, std::string>, TableDescription> latest_;
};

/// Table-description prompt bindings for one table.
llm::Bindings table_description_bindings(const TableRef& table);

/// Cached description, or one table_reviewer call on a miss.
TableDescription describe_table(const TableRef& table, const std::string& db_id, llm::Gateway& gateway,
                                const PromptLibrary& prompts, DescriptionCache& cache, RunContext& ctx);

/// Embeds table descriptions once per distinct text and ranks them against a
/// question. Safe for concurrent use.
class TableSelector {
 public:
  explicit TableSelector(embed::Embedder& embedder, bool include_table_name = false)
      : embedder_(embedder), include_name_(include_table_name) {}

  std::vector<embed::Scored> rank(const Question& q, const std::vector<TableDescription>& descriptions,
                                  std::size_t k);
  bool includes_table_name() const { return include_name_; }

 private:
  embed::Embedder& embedder_;
  bool include_name_;
  std::mutex mu_;
  std::map<std::string, embed::Vector> cache_;
};

/// Top-k table names by cosine(phi(question), phi(description)).
std::vector<std::string> select_tables(const Question& q, const std::vector<TableDescription>& descriptions,
                                       std::size_t k, embed::Embedder& embedder);

enum class AttemptOutcome { rows, empty_result, syntax_error, schema_error, timeout, forbidden, multi_statement };

std::string to_string(AttemptOutcome o);

struct SqlAttempt {
  int attempt_number = 0;
  std::string sql;
  AttemptOutcome outcome = AttemptOutcome::syntax_error;
  std::string message;
  std::optional<sql::ExecutionResult> result;
  double duration_ms = 0.0;

  bool succeeded() const { return outcome == AttemptOutcome::rows || outcome == AttemptOutcome::empty_result; }
};

struct TableContext {
  TableRef table;
  TableSample sample;
  TableDescription description;
};

/// The {schema} block for the SQL prompt, including any retry feedback.
std::string render_schema_block(const Question& q, const std::vector<TableContext>& context,
                                const std::vector<SqlAttempt>& prior_failures);

/// Pulls one statement out of a model reply. The profile's preferred shape
/// is tried first, then the other shapes, then a bare SELECT/WITH reply.
/// Throws Error(sql_extraction) or Error(multi_statement).
std::string extract_sql(std::string_view reply, SqlReplyFormat preferred);

std::string write_sql(const Question& q, const std::vector<TableContext>& context, const Profile& profile,
                      llm::Gateway& gateway, const PromptLibrary& prompts,
                      const std::vector<SqlAttempt>& prior_failures, RunContext& ctx);

/// Literal values the pipeline binds into generated SQL.
sql::Params scope_params(const Question& q);

struct StructuredConfig {
  int max_attempts = 3;
  double timeout_s = sql::kDefaultTimeoutS;
  std::size_t table_k = 10;
};

struct StructuredDeps {
  const sql::Database& db;
  llm::Gateway& gateway;
  TableSelector& selector;
  DescriptionCache& cache;
  const PromptLibrary& prompts;
  const Profile& profile;
};

struct StructuredRun {
  std::optional<StructuredEvidence> evidence;  // set iff an attempt succeeded
  std::vector<SqlAttempt> attempts;
  std::vector<std::string> selected_tables;
};

/// Discovery, descriptions, selection, sampling, then write/execute until
/// the first success or max_attempts. Empty results are successes.
StructuredRun run_structured_pipeline(const Question& q, const StructuredDeps& deps, const StructuredConfig& config,
                                      RunContext& ctx);

}  // namespace ehrnav::structured
