#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ehrnav/model.hpp"

struct sqlite3;

namespace ehrnav::sql {

/// Classified failure of an untrusted statement.
enum class ErrorClass {
  syntax_error,     // does not parse, or fails for a non-schema reason
  schema_error,     // unknown table/column/function, unbound parameter
  timeout,          // cancelled at the deadline
  forbidden,        // anything other than a read-only query (DDL, DML, ATTACH, PRAGMA, ...)
  multi_statement,  // more than one statement in the text
};

std::string to_string(ErrorClass c);

struct ExecutionResult {
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;
};

struct ExecutionOutcome {
  std::optional<ExecutionResult> result;
  std::optional<ErrorClass> error;
  std::string message;
  double elapsed_ms = 0.0;  // real time spent inside the engine

  bool ok() const { return result.has_value(); }
};

/// Named parameters, bound to `:name`, `@name` or `$name` in the statement.
using Params = std::map<std::string, Value>;

inline constexpr double kDefaultTimeoutS = 120.0;

/// Scans SQL text (quotes, identifiers, comments aware) and returns the
/// statement texts, without their trailing semicolons. Blank statements and
/// comment-only statements are dropped.
std::vector<std::string> split_statements(std::string_view sql);

class ConnectionPool;

/// Handle to a single-file database opened read-only. Copies share one
/// bounded connection pool, so the handle can be used from many threads.
class Database {
 public:
  /// Throws Error(database_unavailable) if the file cannot be opened.
  static Database open(const std::filesystem::path& path, std::string id = {}, std::size_t pool_size = 4);

  const std::string& id() const { return id_; }
  const std::filesystem::path& path() const { return path_; }

  /// User tables (no sqlite_* internals) ordered by name, with columns,
  /// primary keys and foreign keys from the engine's own metadata.
  std::vector<TableRef> tables() const;

  bool has_table(std::string_view name) const;

  /// First row by ascending primary key (or rowid). Throws Error(unknown_table).
  std::pair<std::vector<std::string>, std::optional<std::vector<Value>>> first_row(std::string_view table) const;

  /// Runs one untrusted read-only statement under the sandbox: allowlist
  /// authorizer, single-statement check, named-parameter binding and a
  /// deadline enforced by the engine's progress callback.
  ExecutionOutcome execute(std::string_view sql, const Params& params = {},
                           double timeout_s = kDefaultTimeoutS) const;

 private:
  Database() = default;
  std::string id_;
  std::filesystem::path path_;
  std::shared_ptr<ConnectionPool> pool_;
};

/// SHA-256 of the database file bytes.
std::string content_hash(const std::filesystem::path& path);

}  // namespace ehrnav::sql
