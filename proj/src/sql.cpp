#include "ehrnav/sql.hpp"

#include <sqlite3.h>

#include <cctype>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <mutex>

#include "ehrnav/error.hpp"
#include "ehrnav/serialize.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::sql {

std::string to_string(ErrorClass c) {
  switch (c) {
    case ErrorClass::syntax_error: return "syntax_error";
    case ErrorClass::schema_error: return "schema_error";
    case ErrorClass::timeout: return "timeout";
    case ErrorClass::forbidden: return "forbidden";
    case ErrorClass::multi_statement: return "multi_statement";
  }
  return "unknown";
}

std::vector<std::string> split_statements(std::string_view sql) {
  std::vector<std::string> out;
  std::string current;
  bool has_code = false;  // current statement holds something besides comments/space
  auto flush = [&] {
    if (has_code) out.emplace_back(text::trim(current));
    current.clear();
    has_code = false;
  };
  std::size_t i = 0;
  while (i < sql.size()) {
    const char c = sql[i];
    if (c == '-' && i + 1 < sql.size() && sql[i + 1] == '-') {
      const auto nl = sql.find('\n', i);
      const std::size_t end = nl == std::string_view::npos ? sql.size() : nl;
      current.append(sql.substr(i, end - i));
      i = end;
      continue;
    }
    if (c == '/' && i + 1 < sql.size() && sql[i + 1] == '*') {
      const auto close = sql.find("*/", i + 2);
      const std::size_t end = close == std::string_view::npos ? sql.size() : close + 2;
      current.append(sql.substr(i, end - i));
      i = end;
      continue;
    }
    if (c == '\'' || c == '"' || c == '`' || c == '[') {
      const char close = c == '[' ? ']' : c;
      std::size_t j = i + 1;
      while (j < sql.size()) {
        if (sql[j] == close) {
          // Doubled quote is an escaped quote inside the literal.
          if (close != ']' && j + 1 < sql.size() && sql[j + 1] == close) {
            j += 2;
            continue;
          }
          break;
        }
        ++j;
      }
      const std::size_t end = j < sql.size() ? j + 1 : sql.size();
      current.append(sql.substr(i, end - i));
      has_code = true;
      i = end;
      continue;
    }
    if (c == ';') {
      flush();
      ++i;
      continue;
    }
    if (!std::isspace(static_cast<unsigned char>(c))) has_code = true;
    current += c;
    ++i;
  }
  flush();
  return out;
}

class ConnectionPool {
 public:
  ConnectionPool(std::filesystem::path path, std::size_t max) : path_(std::move(path)), max_(max ? max : 1) {}

  ~ConnectionPool() {
    for (sqlite3* db : idle_) sqlite3_close_v2(db);
  }

  sqlite3* acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !idle_.empty() || open_ < max_; });
    if (!idle_.empty()) {
      sqlite3* db = idle_.back();
      idle_.pop_back();
      return db;
    }
    ++open_;
    lock.unlock();
    try {
      return open_connection();
    } catch (...) {
      lock.lock();
      --open_;
      cv_.notify_one();
      throw;
    }
  }

  void release(sqlite3* db) {
    sqlite3_set_authorizer(db, nullptr, nullptr);
    sqlite3_progress_handler(db, 0, nullptr, nullptr);
    std::lock_guard lock(mu_);
    idle_.push_back(db);
    cv_.notify_one();
  }

  sqlite3* open_connection() const {
    sqlite3* db = nullptr;
    const int rc = sqlite3_open_v2(path_.c_str(), &db, SQLITE_OPEN_READONLY, nullptr);
    if (rc != SQLITE_OK) {
      std::string msg = db ? sqlite3_errmsg(db) : "out of memory";
      sqlite3_close_v2(db);
      throw Error(ErrorCode::database_unavailable, "cannot open " + path_.string() + ": " + msg);
    }
    sqlite3_db_config(db, SQLITE_DBCONFIG_DEFENSIVE, 1, nullptr);
    sqlite3_db_config(db, SQLITE_DBCONFIG_ENABLE_LOAD_EXTENSION, 0, nullptr);
    sqlite3_db_config(db, SQLITE_DBCONFIG_ENABLE_TRIGGER, 0, nullptr);
    sqlite3_limit(db, SQLITE_LIMIT_ATTACHED, 0);
    sqlite3_busy_timeout(db, 5000);
    return db;
  }

 private:
  std::filesystem::path path_;
  std::size_t max_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<sqlite3*> idle_;
  std::size_t open_ = 0;
};

namespace {

class Lease {
 public:
  explicit Lease(ConnectionPool& pool) : pool_(pool), db_(pool.acquire()) {}
  ~Lease() { pool_.release(db_); }
  Lease(const Lease&) = delete;
  Lease& operator=(const Lease&) = delete;
  sqlite3* get() const { return db_; }

 private:
  ConnectionPool& pool_;
  sqlite3* db_;
};

struct Statement {
  sqlite3_stmt* stmt = nullptr;
  ~Statement() { sqlite3_finalize(stmt); }
};

std::string quote_ident(std::string_view name) {
  std::string out = "\"";
  for (char c : name) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

Value column_value(sqlite3_stmt* stmt, int i) {
  switch (sqlite3_column_type(stmt, i)) {
    case SQLITE_INTEGER: return static_cast<std::int64_t>(sqlite3_column_int64(stmt, i));
    case SQLITE_FLOAT: return sqlite3_column_double(stmt, i);
    case SQLITE_TEXT: {
      const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt, i));
      return std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt, i)));
    }
    case SQLITE_BLOB: {
      const auto* p = static_cast<const unsigned char*>(sqlite3_column_blob(stmt, i));
      const int n = sqlite3_column_bytes(stmt, i);
      static constexpr char kHex[] = "0123456789abcdef";
      std::string out = "x'";
      for (int k = 0; k < n; ++k) {
        out += kHex[p[k] >> 4];
        out += kHex[p[k] & 0xF];
      }
      return out + "'";
    }
    default: return std::monostate{};
  }
}

// Trusted metadata query; throws on any error.
std::vector<std::vector<Value>> query_all(sqlite3* db, const std::string& sql,
                                          std::vector<std::string>* columns = nullptr) {
  Statement s;
  if (sqlite3_prepare_v2(db, sql.c_str(), -1, &s.stmt, nullptr) != SQLITE_OK) {
    throw Error(ErrorCode::database_unavailable, std::string("metadata query failed: ") + sqlite3_errmsg(db));
  }
  const int n = sqlite3_column_count(s.stmt);
  if (columns) {
    columns->clear();
    for (int i = 0; i < n; ++i) columns->emplace_back(sqlite3_column_name(s.stmt, i));
  }
  std::vector<std::vector<Value>> rows;
  int rc;
  while ((rc = sqlite3_step(s.stmt)) == SQLITE_ROW) {
    std::vector<Value> row;
    for (int i = 0; i < n; ++i) row.push_back(column_value(s.stmt, i));
    rows.push_back(std::move(row));
  }
  if (rc != SQLITE_DONE) {
    throw Error(ErrorCode::database_unavailable, std::string("metadata query failed: ") + sqlite3_errmsg(db));
  }
  return rows;
}

std::string as_text(const Value& v) { return value_to_string(v); }

ErrorClass classify(std::string_view message) {
  if (text::contains_icase(message, "not authorized")) return ErrorClass::forbidden;
  if (text::contains_icase(message, "interrupted")) return ErrorClass::timeout;
  for (const char* p : {"no such table", "no such column", "no such function", "ambiguous column",
                        "no such module", "unbound parameter", "no such collation"}) {
    if (text::contains_icase(message, p)) return ErrorClass::schema_error;
  }
  return ErrorClass::syntax_error;
}

int sandbox_authorizer(void*, int action, const char* arg1, const char* arg2, const char*, const char*) {
  switch (action) {
    case SQLITE_SELECT:
    case SQLITE_READ:
    case SQLITE_RECURSIVE:
      return SQLITE_OK;
    case SQLITE_FUNCTION: {
      const char* fn = arg2 ? arg2 : arg1;
      if (fn && (sqlite3_stricmp(fn, "load_extension") == 0 || sqlite3_stricmp(fn, "readfile") == 0 ||
                 sqlite3_stricmp(fn, "writefile") == 0 || sqlite3_stricmp(fn, "fts3_tokenizer") == 0)) {
        return SQLITE_DENY;
      }
      return SQLITE_OK;
    }
    default:
      return SQLITE_DENY;
  }
}

std::string leading_keyword(std::string_view sql) {
  std::size_t i = 0;
  while (i < sql.size()) {
    const unsigned char c = static_cast<unsigned char>(sql[i]);
    if (std::isspace(c) || c == '(') {
      ++i;
    } else if (sql.substr(i, 2) == "--") {
      const auto nl = sql.find('\n', i);
      i = nl == std::string_view::npos ? sql.size() : nl + 1;
    } else if (sql.substr(i, 2) == "/*") {
      const auto close = sql.find("*/", i + 2);
      i = close == std::string_view::npos ? sql.size() : close + 2;
    } else {
      break;
    }
  }
  std::size_t j = i;
  while (j < sql.size() && std::isalpha(static_cast<unsigned char>(sql[j]))) ++j;
  return text::to_lower_ascii(sql.substr(i, j - i));
}

struct Deadline {
  std::chrono::steady_clock::time_point at;
  bool fired = false;
};

int deadline_handler(void* arg) {
  auto* d = static_cast<Deadline*>(arg);
  if (std::chrono::steady_clock::now() >= d->at) {
    d->fired = true;
    return 1;
  }
  return 0;
}

}  // namespace

Database Database::open(const std::filesystem::path& path, std::string id, std::size_t pool_size) {
  if (!std::filesystem::is_regular_file(path)) {
    throw Error(ErrorCode::database_unavailable, "database file not found: " + path.string());
  }
  Database db;
  db.path_ = path;
  db.id_ = id.empty() ? path.stem().string() : std::move(id);
  db.pool_ = std::make_shared<ConnectionPool>(path, pool_size);
  // Fail fast on files that are not databases.
  Lease lease(*db.pool_);
  query_all(lease.get(), "SELECT count(*) FROM sqlite_master");
  return db;
}

std::vector<TableRef> Database::tables() const {
  Lease lease(*pool_);
  sqlite3* db = lease.get();
  std::vector<TableRef> out;
  const auto names = query_all(
      db, "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' "
          "ORDER BY name");
  for (const auto& row : names) {
    TableRef t;
    t.name = as_text(row[0]);
    // cid, name, type, notnull, dflt_value, pk
    const auto cols = query_all(db, "PRAGMA table_info(" + quote_ident(t.name) + ")");
    std::vector<std::pair<std::int64_t, std::string>> pks;
    for (const auto& c : cols) {
      t.columns.push_back(Column{as_text(c[1]), as_text(c[2])});
      const auto pk_pos = std::get<std::int64_t>(c[5]);
      if (pk_pos > 0) pks.emplace_back(pk_pos, as_text(c[1]));
    }
    std::sort(pks.begin(), pks.end());
    for (auto& [_, name] : pks) t.primary_keys.push_back(name);
    // id, seq, table, from, to, on_update, on_delete, match
    const auto fks = query_all(db, "PRAGMA foreign_key_list(" + quote_ident(t.name) + ")");
    for (const auto& fk : fks) {
      ForeignKey k{as_text(fk[3]), as_text(fk[2]), as_text(fk[4])};
      // An FK without explicit target column references the parent's primary key.
      if (std::holds_alternative<std::monostate>(fk[4])) {
        k.ref_column.clear();
        for (const auto& pc : query_all(db, "PRAGMA table_info(" + quote_ident(k.ref_table) + ")")) {
          if (std::get<std::int64_t>(pc[5]) == 1) k.ref_column = as_text(pc[1]);
        }
      }
      t.foreign_keys.push_back(std::move(k));
    }
    out.push_back(std::move(t));
  }
  return out;
}

bool Database::has_table(std::string_view name) const {
  Lease lease(*pool_);
  Statement s;
  sqlite3_prepare_v2(lease.get(), "SELECT 1 FROM sqlite_master WHERE type = 'table' AND name = ?1", -1, &s.stmt,
                     nullptr);
  sqlite3_bind_text(s.stmt, 1, name.data(), static_cast<int>(name.size()), SQLITE_TRANSIENT);
  return sqlite3_step(s.stmt) == SQLITE_ROW;
}

std::pair<std::vector<std::string>, std::optional<std::vector<Value>>> Database::first_row(
    std::string_view table) const {
  if (!has_table(table)) throw Error(ErrorCode::unknown_table, "unknown table: " + std::string(table));
  Lease lease(*pool_);
  sqlite3* db = lease.get();
  const auto info = query_all(db, "PRAGMA table_info(" + quote_ident(table) + ")");
  std::vector<std::pair<std::int64_t, std::string>> pks;
  for (const auto& c : info) {
    const auto pk_pos = std::get<std::int64_t>(c[5]);
    if (pk_pos > 0) pks.emplace_back(pk_pos, as_text(c[1]));
  }
  std::sort(pks.begin(), pks.end());
  std::string order;
  for (const auto& [_, name] : pks) order += (order.empty() ? "" : ", ") + quote_ident(name);
  if (order.empty()) order = "rowid";
  std::string sql = "SELECT * FROM " + quote_ident(table);
  if (!order.empty()) sql += " ORDER BY " + order;
  sql += " LIMIT 1";
  std::vector<std::string> columns;
  auto rows = query_all(db, sql, &columns);
  if (rows.empty()) return {columns, std::nullopt};
  return {columns, std::move(rows.front())};
}

ExecutionOutcome Database::execute(std::string_view sql_text, const Params& params, double timeout_s) const {
  ExecutionOutcome out;
  auto fail = [&](ErrorClass c, std::string msg) {
    out.error = c;
    out.message = std::move(msg);
    return out;
  };
  if (split_statements(sql_text).empty()) return fail(ErrorClass::syntax_error, "empty statement");
  if (timeout_s <= 0) throw Error(ErrorCode::invalid_argument, "timeout must be positive");

  Lease lease(*pool_);
  sqlite3* db = lease.get();
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  sqlite3_set_authorizer(db, sandbox_authorizer, nullptr);
  Statement s;
  const std::string owned(sql_text);
  const char* tail = nullptr;
  if (sqlite3_prepare_v2(db, owned.c_str(), static_cast<int>(owned.size()), &s.stmt, &tail) != SQLITE_OK) {
    std::string msg = sqlite3_errmsg(db);
    out.elapsed_ms = elapsed();
    const ErrorClass cls = classify(msg);
    return fail(cls, std::move(msg));
  }
  if (tail != nullptr && !split_statements(tail).empty()) {
    out.elapsed_ms = elapsed();
    return fail(ErrorClass::multi_statement, "only a single statement is allowed");
  }
  if (s.stmt == nullptr) return fail(ErrorClass::syntax_error, "no statement");
  if (!sqlite3_stmt_readonly(s.stmt)) return fail(ErrorClass::forbidden, "statement is not read-only");
  if (const auto kw = leading_keyword(owned); kw != "select" && kw != "with" && kw != "values") {
    return fail(ErrorClass::forbidden, "only queries are allowed, not " + (kw.empty() ? std::string("this statement") : kw));
  }

  const int n_params = sqlite3_bind_parameter_count(s.stmt);
  for (int i = 1; i <= n_params; ++i) {
    const char* raw = sqlite3_bind_parameter_name(s.stmt, i);
    if (raw == nullptr || raw[0] == '?') return fail(ErrorClass::syntax_error, "positional parameters are not supported");
    const std::string name(raw + 1);
    auto it = params.find(name);
    if (it == params.end()) return fail(ErrorClass::schema_error, "unbound parameter " + std::string(raw));
    const Value& v = it->second;
    if (std::holds_alternative<std::monostate>(v)) sqlite3_bind_null(s.stmt, i);
    else if (const auto* iv = std::get_if<std::int64_t>(&v)) sqlite3_bind_int64(s.stmt, i, *iv);
    else if (const auto* dv = std::get_if<double>(&v)) sqlite3_bind_double(s.stmt, i, *dv);
    else {
      const auto& sv = std::get<std::string>(v);
      sqlite3_bind_text(s.stmt, i, sv.data(), static_cast<int>(sv.size()), SQLITE_TRANSIENT);
    }
  }

  Deadline deadline{started + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                  std::chrono::duration<double>(timeout_s))};
  sqlite3_progress_handler(db, 1000, deadline_handler, &deadline);

  ExecutionResult result;
  const int n_cols = sqlite3_column_count(s.stmt);
  for (int i = 0; i < n_cols; ++i) result.columns.emplace_back(sqlite3_column_name(s.stmt, i));
  int rc;
  while ((rc = sqlite3_step(s.stmt)) == SQLITE_ROW) {
    std::vector<Value> row;
    row.reserve(static_cast<std::size_t>(n_cols));
    for (int i = 0; i < n_cols; ++i) row.push_back(column_value(s.stmt, i));
    result.rows.push_back(std::move(row));
  }
  out.elapsed_ms = elapsed();
  if (rc != SQLITE_DONE) {
    if (deadline.fired || rc == SQLITE_INTERRUPT) {
      return fail(ErrorClass::timeout, "statement exceeded " + std::to_string(timeout_s) + " s timeout");
    }
    std::string msg = sqlite3_errmsg(db);
    const ErrorClass cls = classify(msg);
    return fail(cls, std::move(msg));
  }
  out.result = std::move(result);
  return out;
}

std::string content_hash(const std::filesystem::path& path) { return text::sha256_hex(read_file(path)); }

}  // namespace ehrnav::sql
