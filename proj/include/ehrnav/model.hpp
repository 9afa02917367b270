#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ehrnav/time.hpp"

namespace ehrnav {

enum class QuestionCategory { lab, drug, lab_drug_combination, other };

std::string to_string(QuestionCategory c);
QuestionCategory parse_category(std::string_view s);

struct Question {
  std::string id;
  std::string text;
  std::optional<std::string> patient_scope;
  std::optional<std::string> admission_scope;
  std::optional<QuestionCategory> category;
  // Retrieval hints consumed by the notes fallback filters. Empty means no filter.
  std::optional<Instant> window_from;
  std::optional<Instant> window_to;
  std::vector<std::string> section_hints;

  bool operator==(const Question&) const = default;
};

/// Throws Error(invalid_argument) when the text is blank.
void validate(const Question& q);

struct Column {
  std::string name;
  std::string type;
  bool operator==(const Column&) const = default;
};

struct ForeignKey {
  std::string column;
  std::string ref_table;
  std::string ref_column;
  bool operator==(const ForeignKey&) const = default;
  auto operator<=>(const ForeignKey&) const = default;
};

struct TableRef {
  std::string name;
  std::vector<Column> columns;
  std::vector<std::string> primary_keys;
  std::vector<ForeignKey> foreign_keys;
  bool operator==(const TableRef&) const = default;
};

/// Throws Error(invalid_argument) on duplicate columns or keys naming unknown columns.
void validate(const TableRef& t);

/// Content hash over name, ordered columns, primary keys and the canonically
/// sorted foreign-key list.
std::string fingerprint_schema(const TableRef& table);

struct TableDescription {
  std::string table;
  std::string description;
  std::string schema_fingerprint;
  bool operator==(const TableDescription&) const = default;
};

struct NoteDocument {
  std::string id;
  std::string patient_scope;
  Instant timestamp;
  std::string text;
  bool operator==(const NoteDocument&) const = default;
};

struct TokenSpan {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  std::size_t size() const { return end - start; }
  bool operator==(const TokenSpan&) const = default;
};

struct NoteChunk {
  std::string note_id;
  std::size_t index = 0;
  TokenSpan token_span;
  Instant timestamp;
  std::string text;                // "[timestamp] " + body
  std::vector<double> embedding;   // empty until indexed
  bool operator==(const NoteChunk&) const = default;
};

/// A single SQL result cell.
using Value = std::variant<std::monostate, std::int64_t, double, std::string>;

std::string value_to_string(const Value& v);

struct StructuredEvidence {
  std::string sql;
  std::vector<std::string> columns;
  std::vector<std::vector<Value>> rows;
  int attempt_count = 0;
  bool operator==(const StructuredEvidence&) const = default;
};

struct ScoredChunk {
  NoteChunk chunk;
  double score = 0.0;
  bool operator==(const ScoredChunk&) const = default;
};

struct UnstructuredEvidence {
  std::vector<ScoredChunk> chunks;
  int k_used = 0;
  bool fallback_mode = false;
  bool operator==(const UnstructuredEvidence&) const = default;
};

struct AnswerRecord {
  std::string question_id;
  std::string sql_section;
  std::string notes_evidence_section;
  std::string response_section;
  std::string raw_model_output;
  bool operator==(const AnswerRecord&) const = default;
};

struct TraceStep {
  std::string agent;
  std::string tool;
  std::string input_digest;
  std::string output_digest;
  double wall_ms = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  double cost = 0.0;
  std::string note;  // free-form detail, e.g. an error class
  bool operator==(const TraceStep&) const = default;
};

struct TraceRecord {
  std::string trace_id;
  std::string question_id;
  std::vector<TraceStep> steps;
  double total_latency_ms = 0.0;
  double total_cost = 0.0;
  bool operator==(const TraceRecord&) const = default;

  std::int64_t total_prompt_tokens() const;
  std::int64_t total_completion_tokens() const;
};

}  // namespace ehrnav
