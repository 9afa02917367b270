#include "ehrnav/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "ehrnav/error.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav {

std::string to_string(QuestionCategory c) {
  switch (c) {
    case QuestionCategory::lab: return "lab";
    case QuestionCategory::drug: return "drug";
    case QuestionCategory::lab_drug_combination: return "lab_drug_combination";
    case QuestionCategory::other: return "other";
  }
  return "other";
}

QuestionCategory parse_category(std::string_view s) {
  if (s == "lab") return QuestionCategory::lab;
  if (s == "drug") return QuestionCategory::drug;
  if (s == "lab_drug_combination") return QuestionCategory::lab_drug_combination;
  if (s == "other") return QuestionCategory::other;
  throw Error(ErrorCode::invalid_argument, "unknown question category: " + std::string(s));
}

void validate(const Question& q) {
  if (text::words(q.text).empty()) {
    throw Error(ErrorCode::invalid_argument, "question text is empty");
  }
}

void validate(const TableRef& t) {
  std::set<std::string> names;
  for (const auto& c : t.columns) {
    if (!names.insert(c.name).second) {
      throw Error(ErrorCode::invalid_argument, "duplicate column '" + c.name + "' in table " + t.name);
    }
  }
  for (const auto& pk : t.primary_keys) {
    if (!names.contains(pk)) {
      throw Error(ErrorCode::invalid_argument, "primary key '" + pk + "' is not a column of " + t.name);
    }
  }
  for (const auto& fk : t.foreign_keys) {
    if (!names.contains(fk.column)) {
      throw Error(ErrorCode::invalid_argument,
                  "foreign key column '" + fk.column + "' is not a column of " + t.name);
    }
  }
}

std::string fingerprint_schema(const TableRef& table) {
  // Unit/record separators keep field boundaries unambiguous.
  constexpr char kUnit = '\x1f';
  constexpr char kRecord = '\x1e';
  std::string canon = "table" + std::string(1, kUnit) + table.name + kRecord;
  for (const auto& c : table.columns) canon += "col" + std::string(1, kUnit) + c.name + kUnit + c.type + kRecord;
  for (const auto& pk : table.primary_keys) canon += "pk" + std::string(1, kUnit) + pk + kRecord;
  auto fks = table.foreign_keys;
  std::sort(fks.begin(), fks.end());
  for (const auto& fk : fks) {
    canon += "fk" + std::string(1, kUnit) + fk.column + kUnit + fk.ref_table + kUnit + fk.ref_column + kRecord;
  }
  return text::sha256_hex(canon);
}

std::string value_to_string(const Value& v) {
  if (std::holds_alternative<std::monostate>(v)) return "NULL";
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) {
    if (!std::isfinite(*d)) return std::isnan(*d) ? "NaN" : (*d > 0 ? "Inf" : "-Inf");
    char buf[40];
    for (int precision = 15; precision <= 17; ++precision) {
      std::snprintf(buf, sizeof(buf), "%.*g", precision, *d);
      if (std::strtod(buf, nullptr) == *d) break;
    }
    return buf;
  }
  return std::get<std::string>(v);
}

std::int64_t TraceRecord::total_prompt_tokens() const {
  std::int64_t n = 0;
  for (const auto& s : steps) n += s.prompt_tokens;
  return n;
}

std::int64_t TraceRecord::total_completion_tokens() const {
  std::int64_t n = 0;
  for (const auto& s : steps) n += s.completion_tokens;
  return n;
}

}  // namespace ehrnav
