#pragma once

// Canonical line-delimited JSON encoding for every record type. One record per
// line; object keys are emitted in sorted order so output is byte-stable.

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "ehrnav/model.hpp"

namespace ehrnav {

using Json = nlohmann::json;

void to_json(Json& j, const Question& v);
void from_json(const Json& j, Question& v);
void to_json(Json& j, const Column& v);
void from_json(const Json& j, Column& v);
void to_json(Json& j, const ForeignKey& v);
void from_json(const Json& j, ForeignKey& v);
void to_json(Json& j, const TableRef& v);
void from_json(const Json& j, TableRef& v);
void to_json(Json& j, const TableDescription& v);
void from_json(const Json& j, TableDescription& v);
void to_json(Json& j, const NoteDocument& v);
void from_json(const Json& j, NoteDocument& v);
void to_json(Json& j, const NoteChunk& v);
void from_json(const Json& j, NoteChunk& v);
void to_json(Json& j, const StructuredEvidence& v);
void from_json(const Json& j, StructuredEvidence& v);
void to_json(Json& j, const ScoredChunk& v);
void from_json(const Json& j, ScoredChunk& v);
void to_json(Json& j, const UnstructuredEvidence& v);
void from_json(const Json& j, UnstructuredEvidence& v);
void to_json(Json& j, const AnswerRecord& v);
void from_json(const Json& j, AnswerRecord& v);
void to_json(Json& j, const TraceStep& v);
void from_json(const Json& j, TraceStep& v);
void to_json(Json& j, const TraceRecord& v);
void from_json(const Json& j, TraceRecord& v);

Json value_to_json(const Value& v);
Value value_from_json(const Json& j);

template <typename T>
std::string to_line(const T& record) {
  return Json(record).dump();
}

template <typename T>
T from_line(std::string_view line) {
  return Json::parse(line).get<T>();
}

/// Parses every non-blank line. Errors name the 1-based line number.
std::vector<Json> read_jsonl(const std::filesystem::path& path);

void append_line(const std::filesystem::path& path, const Json& record);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace ehrnav
