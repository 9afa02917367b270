#include "ehrnav/serialize.hpp"

#include <fstream>
#include <sstream>

#include "ehrnav/error.hpp"

namespace ehrnav {

namespace {

template <typename T>
void opt_to(Json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
  else j[key] = nullptr;
}

template <typename T>
void opt_from(const Json& j, const char* key, std::optional<T>& v) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) v.reset();
  else v = it->get<T>();
}

void instant_opt_to(Json& j, const char* key, const std::optional<Instant>& v) {
  if (v) j[key] = format_iso(*v);
  else j[key] = nullptr;
}

void instant_opt_from(const Json& j, const char* key, std::optional<Instant>& v) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) v.reset();
  else v = parse_instant(it->get<std::string>());
}

}  // namespace

Json value_to_json(const Value& v) {
  if (std::holds_alternative<std::monostate>(v)) return nullptr;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  if (const auto* d = std::get_if<double>(&v)) return *d;
  return std::get<std::string>(v);
}

Value value_from_json(const Json& j) {
  if (j.is_null()) return std::monostate{};
  if (j.is_number_integer()) return j.get<std::int64_t>();
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  return j.dump();
}

void to_json(Json& j, const Question& v) {
  j = Json{{"id", v.id}, {"text", v.text}, {"section_hints", v.section_hints}};
  opt_to(j, "patient_scope", v.patient_scope);
  opt_to(j, "admission_scope", v.admission_scope);
  if (v.category) j["category"] = to_string(*v.category);
  else j["category"] = nullptr;
  instant_opt_to(j, "window_from", v.window_from);
  instant_opt_to(j, "window_to", v.window_to);
}

void from_json(const Json& j, Question& v) {
  j.at("id").get_to(v.id);
  j.at("text").get_to(v.text);
  opt_from(j, "patient_scope", v.patient_scope);
  opt_from(j, "admission_scope", v.admission_scope);
  auto c = j.find("category");
  if (c != j.end() && !c->is_null()) v.category = parse_category(c->get<std::string>());
  else v.category.reset();
  instant_opt_from(j, "window_from", v.window_from);
  instant_opt_from(j, "window_to", v.window_to);
  v.section_hints = j.value("section_hints", std::vector<std::string>{});
}

void to_json(Json& j, const Column& v) { j = Json{{"name", v.name}, {"type", v.type}}; }
void from_json(const Json& j, Column& v) {
  j.at("name").get_to(v.name);
  j.at("type").get_to(v.type);
}

void to_json(Json& j, const ForeignKey& v) {
  j = Json{{"column", v.column}, {"ref_table", v.ref_table}, {"ref_column", v.ref_column}};
}
void from_json(const Json& j, ForeignKey& v) {
  j.at("column").get_to(v.column);
  j.at("ref_table").get_to(v.ref_table);
  j.at("ref_column").get_to(v.ref_column);
}

void to_json(Json& j, const TableRef& v) {
  j = Json{{"name", v.name}, {"columns", v.columns}, {"primary_keys", v.primary_keys},
           {"foreign_keys", v.foreign_keys}};
}
void from_json(const Json& j, TableRef& v) {
  j.at("name").get_to(v.name);
  j.at("columns").get_to(v.columns);
  j.at("primary_keys").get_to(v.primary_keys);
  j.at("foreign_keys").get_to(v.foreign_keys);
}

void to_json(Json& j, const TableDescription& v) {
  j = Json{{"table", v.table}, {"description", v.description}, {"schema_fingerprint", v.schema_fingerprint}};
}
void from_json(const Json& j, TableDescription& v) {
  j.at("table").get_to(v.table);
  j.at("description").get_to(v.description);
  j.at("schema_fingerprint").get_to(v.schema_fingerprint);
}

void to_json(Json& j, const NoteDocument& v) {
  j = Json{{"id", v.id}, {"patient", v.patient_scope}, {"timestamp", format_iso(v.timestamp)}, {"text", v.text}};
}
void from_json(const Json& j, NoteDocument& v) {
  j.at("id").get_to(v.id);
  const Json& patient = j.at("patient");
  v.patient_scope = patient.is_string() ? patient.get<std::string>() : patient.dump();
  v.timestamp = parse_instant(j.at("timestamp").get<std::string>());
  j.at("text").get_to(v.text);
}

void to_json(Json& j, const NoteChunk& v) {
  j = Json{{"note_id", v.note_id},
           {"index", v.index},
           {"token_span", Json::array({v.token_span.start, v.token_span.end})},
           {"timestamp", format_iso(v.timestamp)},
           {"text", v.text},
           {"embedding", v.embedding}};
}
void from_json(const Json& j, NoteChunk& v) {
  j.at("note_id").get_to(v.note_id);
  j.at("index").get_to(v.index);
  const Json& span = j.at("token_span");
  v.token_span = TokenSpan{span.at(0).get<std::size_t>(), span.at(1).get<std::size_t>()};
  v.timestamp = parse_instant(j.at("timestamp").get<std::string>());
  j.at("text").get_to(v.text);
  v.embedding = j.value("embedding", std::vector<double>{});
}

void to_json(Json& j, const StructuredEvidence& v) {
  Json rows = Json::array();
  for (const auto& row : v.rows) {
    Json r = Json::array();
    for (const auto& cell : row) r.push_back(value_to_json(cell));
    rows.push_back(std::move(r));
  }
  j = Json{{"sql", v.sql}, {"columns", v.columns}, {"rows", std::move(rows)}, {"attempt_count", v.attempt_count}};
}
void from_json(const Json& j, StructuredEvidence& v) {
  j.at("sql").get_to(v.sql);
  j.at("columns").get_to(v.columns);
  v.rows.clear();
  for (const auto& r : j.at("rows")) {
    std::vector<Value> row;
    for (const auto& cell : r) row.push_back(value_from_json(cell));
    v.rows.push_back(std::move(row));
  }
  j.at("attempt_count").get_to(v.attempt_count);
}

void to_json(Json& j, const ScoredChunk& v) { j = Json{{"chunk", v.chunk}, {"score", v.score}}; }
void from_json(const Json& j, ScoredChunk& v) {
  j.at("chunk").get_to(v.chunk);
  j.at("score").get_to(v.score);
}

void to_json(Json& j, const UnstructuredEvidence& v) {
  j = Json{{"chunks", v.chunks}, {"k_used", v.k_used}, {"fallback_mode", v.fallback_mode}};
}
void from_json(const Json& j, UnstructuredEvidence& v) {
  j.at("chunks").get_to(v.chunks);
  j.at("k_used").get_to(v.k_used);
  j.at("fallback_mode").get_to(v.fallback_mode);
}

void to_json(Json& j, const AnswerRecord& v) {
  j = Json{{"question_id", v.question_id},
           {"sql_section", v.sql_section},
           {"notes_evidence_section", v.notes_evidence_section},
           {"response_section", v.response_section},
           {"raw_model_output", v.raw_model_output}};
}
void from_json(const Json& j, AnswerRecord& v) {
  j.at("question_id").get_to(v.question_id);
  j.at("sql_section").get_to(v.sql_section);
  j.at("notes_evidence_section").get_to(v.notes_evidence_section);
  j.at("response_section").get_to(v.response_section);
  j.at("raw_model_output").get_to(v.raw_model_output);
}

void to_json(Json& j, const TraceStep& v) {
  j = Json{{"agent", v.agent},
           {"tool", v.tool},
           {"input_digest", v.input_digest},
           {"output_digest", v.output_digest},
           {"wall_ms", v.wall_ms},
           {"prompt_tokens", v.prompt_tokens},
           {"completion_tokens", v.completion_tokens},
           {"cost", v.cost},
           {"note", v.note}};
}
void from_json(const Json& j, TraceStep& v) {
  j.at("agent").get_to(v.agent);
  j.at("tool").get_to(v.tool);
  j.at("input_digest").get_to(v.input_digest);
  j.at("output_digest").get_to(v.output_digest);
  j.at("wall_ms").get_to(v.wall_ms);
  j.at("prompt_tokens").get_to(v.prompt_tokens);
  j.at("completion_tokens").get_to(v.completion_tokens);
  j.at("cost").get_to(v.cost);
  v.note = j.value("note", std::string{});
}

void to_json(Json& j, const TraceRecord& v) {
  j = Json{{"trace_id", v.trace_id},
           {"question_id", v.question_id},
           {"steps", v.steps},
           {"total_latency_ms", v.total_latency_ms},
           {"total_cost", v.total_cost}};
}
void from_json(const Json& j, TraceRecord& v) {
  j.at("trace_id").get_to(v.trace_id);
  j.at("question_id").get_to(v.question_id);
  j.at("steps").get_to(v.steps);
  j.at("total_latency_ms").get_to(v.total_latency_ms);
  j.at("total_cost").get_to(v.total_cost);
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::vector<Json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw Error(ErrorCode::dataset_format,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void append_line(const std::filesystem::path& path, const Json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorCode::io, "cannot append to " + path.string());
  out << record.dump() << '\n';
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << content;
}

}  // namespace ehrnav
