#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ehrnav/navigator.hpp"
#include "ehrnav/serialize.hpp"

namespace ehrnav::eval {

/// Gold answer: free text or a set of values.
using Gold = std::variant<std::string, std::vector<std::string>>;

/// Trim, collapse whitespace runs, casefold (after NFC).
std::string normalize_answer(std::string_view s);

/// 1 iff the normalized answers are equal; value sets compare as sets and a
/// lone text compares as a one-element set. Symmetric.
int exact_match(const Gold& prediction, const Gold& gold);

struct Rouge {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// ROUGE-L over casefolded word tokens. An empty operand scores zero.
Rouge rouge_l(std::string_view prediction, std::string_view reference);

/// Longest common subsequence length of two token sequences.
std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

/// Linear interpolation between closest ranks, inclusive of the extremes
/// (q in [0, 1]). Throws on an empty sample.
double quantile(std::vector<double> values, double q);

struct Spread {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  std::size_t n = 0;
};

Spread spread(const std::vector<double>& values);

struct BenchmarkItem {
  Question question;
  Gold gold;
  std::optional<std::string> gold_sql;
  Modality modality = Modality::multimodal;
  std::string profile;
};

struct LoadOptions {
  std::string profile = "fixture";
  /// Database for gold-SQL execution: computing missing golds and, with
  /// drop_gold_sql_timeouts, dropping items whose gold SQL times out.
  const sql::Database* gold_db = nullptr;
  bool drop_gold_sql_timeouts = false;
  double gold_sql_timeout_s = sql::kDefaultTimeoutS;
};

struct LoadResult {
  std::vector<BenchmarkItem> items;
  std::size_t dropped_gold_sql_timeouts = 0;
  std::vector<std::string> dropped_ids;
};

/// Reads a JSON array or JSON-lines file. Shapes by profile:
///   fixture:   {id, question, gold, modality, patient?, admission?, category?,
///               gold_sql?, time_from?, time_to?, sections?}
///   ehrsql:    {id, question, query, answer?}
///   drugehrqa: {id?, question|Question, query|SQL, answer|Answer}
///   ehrnoteqa: {id?, patient_id, question, choice_A..choice_E, answer}
/// Multiple-choice golds become the text of the keyed choice. A malformed
/// row throws Error(dataset_format) naming its 1-based row number.
LoadResult load_dataset(const std::filesystem::path& path, const LoadOptions& options);

/// Values of every result cell, as strings.
std::vector<std::string> result_values(const StructuredEvidence& e);

struct ItemResult {
  std::string id;
  std::string category;
  Modality modality = Modality::multimodal;
  Gold prediction;
  Gold gold;
  int exact_match = 0;
  std::optional<Rouge> rouge;
  bool correct = false;
  std::string verdict_source = "metric";  // metric | file
  double latency_ms = 0.0;
  double cost = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  int sql_attempts = 0;
  std::optional<bool> fallback_mode;
  std::optional<std::string> error_class;
  std::string error_message;
  std::string trace_id;
  TraceRecord trace;
};

struct CategoryAggregate {
  std::size_t n = 0;
  std::size_t correct = 0;
  Spread latency_ms;
  double cost = 0.0;
};

struct Aggregates {
  std::size_t n = 0;
  std::size_t correct = 0;
  std::size_t errors = 0;
  double accuracy = 0.0;
  std::optional<double> rouge_l_f1_mean;
  std::optional<double> rouge_l_f1_median;
  Spread latency_ms;
  double total_cost = 0.0;
  std::map<std::string, CategoryAggregate> by_category;
};

/// Aggregates computed over the items sorted by id, so input order only
/// permutes rows.
Aggregates aggregate(const std::vector<ItemResult>& items);

struct RunReport {
  std::vector<ItemResult> items;
  Aggregates aggregates;
  Json config;
};

struct BenchmarkOptions {
  std::string db_id;
  std::optional<std::string> profile;
  std::size_t parallelism = 1;
  /// Per-item virtual clocks (scripted backends); otherwise wall time.
  bool virtual_clock = true;
  /// item id -> human verdict, overriding the metric.
  std::map<std::string, bool> verdicts;
};

/// Setup (table descriptions, note indexes) then every item through the arms
/// its modality engages. Item failures are recorded as incorrect with their
/// error class; they never abort the run.
RunReport run_benchmark(const std::vector<BenchmarkItem>& items, Navigator& navigator,
                        const BenchmarkOptions& options);

/// {"id": true|false} JSON object, or JSON lines {id, verdict}.
std::map<std::string, bool> load_verdicts(const std::filesystem::path& path);

/// Structured report with sorted keys. Throws Error(invalid_argument) when the
/// aggregates do not match a recomputation from the rows.
std::string report_json(const RunReport& report);
std::string summary_table(const RunReport& report);

void check_consistency(const RunReport& report);

Json to_json(const Gold& g);

}  // namespace ehrnav::eval
