#include "ehrnav/structured.hpp"

#include <algorithm>
#include <cctype>

#include "ehrnav/error.hpp"
#include "ehrnav/serialize.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::structured {

const TableRef* SchemaCatalog::find(std::string_view name) const {
  for (const auto& t : tables) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

SchemaCatalog discover_schema(const sql::Database& db) {
  SchemaCatalog c;
  c.db_id = db.id();
  c.discovered_at = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
  c.tables = db.tables();
  for (const auto& t : c.tables) validate(t);
  return c;
}

TableSample sample_table(const sql::Database& db, std::string_view table) {
  auto [columns, row] = db.first_row(table);
  return TableSample{std::string(table), std::move(columns), std::move(row)};
}

std::string render_sample_row(const TableSample& sample) {
  if (!sample.sample_row) return "(table is empty)";
  constexpr std::size_t kMaxValueChars = 120;
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < sample.columns.size(); ++i) {
    std::string v = value_to_string((*sample.sample_row)[i]);
    if (v.size() > kMaxValueChars) v = v.substr(0, kMaxValueChars) + "...";
    parts.push_back(sample.columns[i] + "=" + v);
  }
  return text::join(parts, "; ");
}

DescriptionCache::DescriptionCache(std::filesystem::path file) : file_(std::move(file)) {
  if (!std::filesystem::exists(*file_)) return;
  for (const auto& j : read_jsonl(*file_)) {
    const TableDescription d = j.get<TableDescription>();
    const std::string db_id = j.at("db_id").get<std::string>();
    entries_[{db_id, d.table, d.schema_fingerprint}] = d;
    latest_[{db_id, d.table}] = d;
  }
}

std::optional<TableDescription> DescriptionCache::lookup(const std::string& db_id, const std::string& table,
                                                         const std::string& fingerprint) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find({db_id, table, fingerprint});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<TableDescription> DescriptionCache::latest(const std::string& db_id, const std::string& table) const {
  std::shared_lock lock(mu_);
  auto it = latest_.find({db_id, table});
  if (it == latest_.end()) return std::nullopt;
  return it->second;
}

void DescriptionCache::store(const std::string& db_id, const TableDescription& description) {
  std::unique_lock lock(mu_);
  entries_[{db_id, description.table, description.schema_fingerprint}] = description;
  latest_[{db_id, description.table}] = description;
  if (file_) {
    Json j = description;
    j["db_id"] = db_id;
    append_line(*file_, j);
  }
}

llm::Bindings table_description_bindings(const TableRef& table) {
  std::vector<std::string> cols;
  for (const auto& c : table.columns) cols.push_back("- " + c.name + (c.type.empty() ? "" : " (" + c.type + ")"));
  std::vector<std::string> fks;
  for (const auto& fk : table.foreign_keys) fks.push_back(fk.column + " -> " + fk.ref_table + "." + fk.ref_column);
  return llm::Bindings{
      {"table_name", table.name},
      {"columns", text::join(cols, "\n")},
      {"primary_keys", table.primary_keys.empty() ? "None" : text::join(table.primary_keys, ", ")},
      {"foreign_keys", fks.empty() ? "None" : text::join(fks, ", ")},
  };
}

TableDescription describe_table(const TableRef& table, const std::string& db_id, llm::Gateway& gateway,
                                const PromptLibrary& prompts, DescriptionCache& cache, RunContext& ctx) {
  const std::string fp = fingerprint_schema(table);
  if (auto hit = cache.lookup(db_id, table.name, fp)) return *hit;

  llm::ChatRequest req;
  req.role_tag = llm::RoleTag::table_reviewer;
  req.rendered_prompt = llm::render(prompts.get("table_description"), table_description_bindings(table));
  const auto reply = gateway.complete(req, ctx);

  std::string_view body = text::trim(reply.text);
  if (text::starts_with_icase(body, "description:")) body = text::trim(body.substr(12));
  if (body.empty()) {
    throw Error(ErrorCode::empty_description, "table reviewer returned an empty description for " + table.name);
  }
  TableDescription d{table.name, std::string(body), fp};
  cache.store(db_id, d);
  return d;
}

std::vector<embed::Scored> TableSelector::rank(const Question& q, const std::vector<TableDescription>& descriptions,
                                               std::size_t k) {
  if (descriptions.empty()) throw Error(ErrorCode::invalid_argument, "select_tables: no table descriptions");
  std::vector<std::string> texts;
  for (const auto& d : descriptions) texts.push_back(include_name_ ? d.table + ": " + d.description : d.description);

  std::vector<std::string> missing;
  {
    std::lock_guard lock(mu_);
    for (const auto& t : texts) {
      if (!cache_.contains(t) && std::find(missing.begin(), missing.end(), t) == missing.end()) missing.push_back(t);
    }
  }
  if (!missing.empty()) {
    auto vectors = embedder_.embed_all(missing);
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < missing.size(); ++i) cache_.emplace(missing[i], std::move(vectors[i]));
  }

  embed::VectorIndex index;
  {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < descriptions.size(); ++i) index.add(descriptions[i].table, cache_.at(texts[i]));
  }
  const embed::Vector qv = embedder_.embed(q.text);
  return index.top_k(qv, k);
}

std::vector<std::string> select_tables(const Question& q, const std::vector<TableDescription>& descriptions,
                                       std::size_t k, embed::Embedder& embedder) {
  TableSelector selector(embedder);
  std::vector<std::string> names;
  for (auto& s : selector.rank(q, descriptions, k)) names.push_back(std::move(s.key));
  return names;
}

std::string to_string(AttemptOutcome o) {
  switch (o) {
    case AttemptOutcome::rows: return "rows";
    case AttemptOutcome::empty_result: return "empty_result";
    case AttemptOutcome::syntax_error: return "syntax_error";
    case AttemptOutcome::schema_error: return "schema_error";
    case AttemptOutcome::timeout: return "timeout";
    case AttemptOutcome::forbidden: return "forbidden";
    case AttemptOutcome::multi_statement: return "multi_statement";
  }
  return "unknown";
}

namespace {

AttemptOutcome from_error_class(sql::ErrorClass c) {
  switch (c) {
    case sql::ErrorClass::syntax_error: return AttemptOutcome::syntax_error;
    case sql::ErrorClass::schema_error: return AttemptOutcome::schema_error;
    case sql::ErrorClass::timeout: return AttemptOutcome::timeout;
    case sql::ErrorClass::forbidden: return AttemptOutcome::forbidden;
    case sql::ErrorClass::multi_statement: return AttemptOutcome::multi_statement;
  }
  return AttemptOutcome::syntax_error;
}

std::string strip_fences(std::string_view s) {
  s = text::trim(s);
  if (s.starts_with("```")) {
    const auto nl = s.find('\n');
    s = nl == std::string_view::npos ? std::string_view{} : s.substr(nl + 1);
    const auto close = s.rfind("```");
    if (close != std::string_view::npos) s = s.substr(0, close);
  }
  return std::string(text::trim(s));
}

std::optional<std::string> from_json_object(std::string_view reply) {
  for (std::size_t start = reply.find('{'); start != std::string_view::npos; start = reply.find('{', start + 1)) {
    // Find the matching brace, skipping string contents.
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < reply.size(); ++i) {
      const char c = reply[i];
      if (in_string) {
        if (c == '\\') ++i;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) {
        try {
          const Json j = Json::parse(reply.substr(start, i - start + 1));
          if (j.is_object()) {
            for (const auto& [key, value] : j.items()) {
              if (text::iequals_ascii(key, "sql") && value.is_string()) return value.get<std::string>();
            }
          }
        } catch (const Json::exception&) {
        }
        break;
      }
    }
  }
  return std::nullopt;
}

std::optional<std::string> from_fenced_block(std::string_view reply) {
  const auto open = reply.find("```");
  if (open == std::string_view::npos) return std::nullopt;
  const auto nl = reply.find('\n', open);
  if (nl == std::string_view::npos) return std::nullopt;
  const std::string_view lang = text::trim(reply.substr(open + 3, nl - open - 3));
  if (!lang.empty() && !text::iequals_ascii(lang, "sql") && !text::iequals_ascii(lang, "sqlite")) return std::nullopt;
  const auto close = reply.find("```", nl + 1);
  if (close == std::string_view::npos) return std::nullopt;
  return std::string(text::trim(reply.substr(nl + 1, close - nl - 1)));
}

std::optional<std::string> from_sqlquery_line(std::string_view reply) {
  const std::string lower = text::to_lower_ascii(reply);
  const auto at = lower.find("sqlquery:");
  if (at == std::string::npos) return std::nullopt;
  std::size_t end = reply.size();
  for (const char* stop : {"\nsqlresult:", "\nanswer:", "\nquestion:"}) {
    const auto p = lower.find(stop, at);
    if (p != std::string::npos) end = std::min(end, p);
  }
  return strip_fences(reply.substr(at + 9, end - at - 9));
}

std::optional<std::string> bare_statement(std::string_view reply) {
  const std::string body = strip_fences(reply);
  if (text::starts_with_icase(body, "select") || text::starts_with_icase(body, "with")) return body;
  return std::nullopt;
}

}  // namespace

std::string extract_sql(std::string_view reply, SqlReplyFormat preferred) {
  using Extractor = std::optional<std::string> (*)(std::string_view);
  std::vector<Extractor> order;
  switch (preferred) {
    case SqlReplyFormat::json_object: order = {from_json_object, from_fenced_block, from_sqlquery_line}; break;
    case SqlReplyFormat::fenced_block: order = {from_fenced_block, from_sqlquery_line, from_json_object}; break;
    case SqlReplyFormat::sqlquery_line: order = {from_sqlquery_line, from_fenced_block, from_json_object}; break;
  }
  order.push_back(bare_statement);
  for (auto extractor : order) {
    auto found = extractor(reply);
    if (!found || text::trim(*found).empty()) continue;
    const auto statements = sql::split_statements(*found);
    if (statements.empty()) continue;
    if (statements.size() > 1) {
      throw Error(ErrorCode::multi_statement,
                  "reply contains " + std::to_string(statements.size()) + " statements; exactly one is allowed");
    }
    return statements.front();
  }
  throw Error(ErrorCode::sql_extraction, "no SQL statement found in model reply");
}

std::string render_schema_block(const Question& q, const std::vector<TableContext>& context,
                                const std::vector<SqlAttempt>& prior_failures) {
  std::string out;
  for (std::size_t i = 0; i < context.size(); ++i) {
    const auto& c = context[i];
    if (i) out += "\n\n";
    out += "Table: " + c.table.name + "\n";
    out += "Description: " + c.description.description + "\n";
    std::vector<std::string> cols;
    for (const auto& col : c.table.columns) cols.push_back(col.type.empty() ? col.name : col.name + " " + col.type);
    out += "Columns: " + text::join(cols, ", ") + "\n";
    out += "Primary keys: " + (c.table.primary_keys.empty() ? std::string("None") : text::join(c.table.primary_keys, ", ")) + "\n";
    std::vector<std::string> fks;
    for (const auto& fk : c.table.foreign_keys) fks.push_back(fk.column + " -> " + fk.ref_table + "." + fk.ref_column);
    out += "Foreign keys: " + (fks.empty() ? std::string("None") : text::join(fks, ", ")) + "\n";
    out += "Sample row: " + render_sample_row(c.sample);
  }
  std::vector<std::string> params;
  if (q.patient_scope) params.push_back(":patient_id (the patient in scope)");
  if (q.admission_scope) params.push_back(":admission_id (the admission in scope)");
  if (!params.empty()) out += "\n\nBound parameters available to the query: " + text::join(params, ", ");
  for (const auto& f : prior_failures) {
    out += "\n\nPrevious attempt failed:\n";
    out += "Attempt: " + std::to_string(f.attempt_number) + "\n";
    out += "SQL: " + (f.sql.empty() ? std::string("(none extracted)") : f.sql) + "\n";
    out += "Error (" + to_string(f.outcome) + "): " + f.message;
  }
  return out;
}

std::string write_sql(const Question& q, const std::vector<TableContext>& context, const Profile& profile,
                      llm::Gateway& gateway, const PromptLibrary& prompts,
                      const std::vector<SqlAttempt>& prior_failures, RunContext& ctx) {
  const llm::Bindings bindings{{"schema", render_schema_block(q, context, prior_failures)},
                               {"query_str", q.text},
                               {"dialect", profile.dialect}};
  llm::ChatRequest req;
  req.role_tag = llm::RoleTag::sql_writer;
  req.rendered_prompt = llm::render(prompts.get(profile.sql_template), bindings);
  const auto reply = gateway.complete(req, ctx);
  return extract_sql(reply.text, profile.reply_format);
}

sql::Params scope_params(const Question& q) {
  auto as_value = [](const std::string& s) -> Value {
    const bool numeric = !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    if (numeric && s.size() < 19) return static_cast<std::int64_t>(std::stoll(s));
    return s;
  };
  sql::Params p;
  if (q.patient_scope) p["patient_id"] = as_value(*q.patient_scope);
  if (q.admission_scope) p["admission_id"] = as_value(*q.admission_scope);
  return p;
}

StructuredRun run_structured_pipeline(const Question& q, const StructuredDeps& deps, const StructuredConfig& config,
                                      RunContext& ctx) {
  if (config.max_attempts < 1) throw Error(ErrorCode::config, "max_attempts must be at least 1");
  StructuredRun run;

  StepTimer discovery_timer(ctx.clock);
  const SchemaCatalog catalog = discover_schema(deps.db);
  ctx.trace.add(TraceStep{"table_reviewer", "schema_discovery", text::digest(deps.db.id()),
                          text::digest(std::to_string(catalog.tables.size())), discovery_timer.elapsed_ms(), 0, 0, 0.0,
                          std::to_string(catalog.tables.size()) + " tables"});
  if (catalog.tables.empty()) return run;

  std::size_t hits = 0;
  for (const auto& t : catalog.tables) {
    if (deps.cache.lookup(catalog.db_id, t.name, fingerprint_schema(t))) ++hits;
  }
  ctx.trace.add(TraceStep{"table_reviewer", "description_cache", text::digest(catalog.db_id), "", 0.0, 0, 0, 0.0,
                          std::to_string(hits) + "/" + std::to_string(catalog.tables.size()) + " cached"});
  std::vector<TableDescription> descriptions;
  for (const auto& t : catalog.tables) {
    descriptions.push_back(describe_table(t, catalog.db_id, deps.gateway, deps.prompts, deps.cache, ctx));
  }

  StepTimer select_timer(ctx.clock);
  for (auto& s : deps.selector.rank(q, descriptions, config.table_k)) run.selected_tables.push_back(std::move(s.key));
  ctx.trace.add(TraceStep{"table_retriever",
                          deps.selector.includes_table_name() ? "table_index.top_k[name+description]"
                                                              : "table_index.top_k[description]",
                          text::digest(q.text), text::digest(text::join(run.selected_tables, ",")),
                          select_timer.elapsed_ms(), 0, 0, 0.0, text::join(run.selected_tables, ",")});

  StepTimer sample_timer(ctx.clock);
  std::vector<TableContext> context;
  for (const auto& name : run.selected_tables) {
    const TableRef* t = catalog.find(name);
    auto d = std::find_if(descriptions.begin(), descriptions.end(), [&](const auto& x) { return x.table == name; });
    context.push_back(TableContext{*t, sample_table(deps.db, name), *d});
  }
  ctx.trace.add(TraceStep{"sql_sampler", "sql_sampler", text::digest(text::join(run.selected_tables, ",")), "",
                          sample_timer.elapsed_ms(), 0, 0, 0.0, ""});

  const sql::Params params = scope_params(q);
  std::vector<SqlAttempt> failures;
  for (int n = 1; n <= config.max_attempts; ++n) {
    StepTimer attempt_timer(ctx.clock);
    SqlAttempt attempt;
    attempt.attempt_number = n;
    try {
      attempt.sql = write_sql(q, context, deps.profile, deps.gateway, deps.prompts, failures, ctx);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::sql_extraction && e.code() != ErrorCode::multi_statement) throw;
      attempt.outcome =
          e.code() == ErrorCode::multi_statement ? AttemptOutcome::multi_statement : AttemptOutcome::syntax_error;
      attempt.message = e.what();
    }
    if (!attempt.sql.empty()) {
      StepTimer exec_timer(ctx.clock);
      auto outcome = deps.db.execute(attempt.sql, params, config.timeout_s);
      if (outcome.ok()) {
        attempt.outcome = outcome.result->rows.empty() ? AttemptOutcome::empty_result : AttemptOutcome::rows;
        attempt.result = std::move(outcome.result);
      } else {
        attempt.outcome = from_error_class(*outcome.error);
        attempt.message = outcome.message;
      }
      ctx.trace.add(TraceStep{"sql_executor", "sqlite.execute", text::digest(attempt.sql),
                              text::digest(to_string(attempt.outcome)), exec_timer.elapsed_ms(), 0, 0, 0.0,
                              "attempt " + std::to_string(n) + ": " + to_string(attempt.outcome)});
    }
    attempt.duration_ms = attempt_timer.elapsed_ms();
    run.attempts.push_back(attempt);
    if (attempt.succeeded()) {
      StructuredEvidence e;
      e.sql = attempt.sql;
      e.columns = attempt.result->columns;
      e.rows = attempt.result->rows;
      e.attempt_count = n;
      run.evidence = std::move(e);
      break;
    }
    failures.push_back(std::move(attempt));
  }
  return run;
}

}  // namespace ehrnav::structured
