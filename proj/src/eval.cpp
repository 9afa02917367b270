#include "ehrnav/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <set>
#include <thread>

#include "ehrnav/error.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::eval {

std::string normalize_answer(std::string_view s) { return text::casefold(text::collapse_whitespace(s)); }

namespace {

std::set<std::string> as_set(const Gold& g) {
  std::set<std::string> out;
  if (const auto* s = std::get_if<std::string>(&g)) {
    out.insert(normalize_answer(*s));
  } else {
    for (const auto& v : std::get<std::vector<std::string>>(g)) out.insert(normalize_answer(v));
  }
  return out;
}

std::string as_text(const Gold& g) {
  if (const auto* s = std::get_if<std::string>(&g)) return *s;
  return text::join(std::get<std::vector<std::string>>(g), ", ");
}

}  // namespace

int exact_match(const Gold& prediction, const Gold& gold) { return as_set(prediction) == as_set(gold) ? 1 : 0; }

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (const auto& x : a) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = x == b[j - 1] ? diag + 1 : std::max(row[j], row[j - 1]);
      diag = up;
    }
  }
  return row[b.size()];
}

Rouge rouge_l(std::string_view prediction, std::string_view reference) {
  const auto p = text::words(text::casefold(prediction));
  const auto r = text::words(text::casefold(reference));
  if (p.empty() || r.empty()) return {};
  const auto l = static_cast<double>(lcs_length(p, r));
  if (l == 0) return {};
  Rouge out;
  out.precision = l / static_cast<double>(p.size());
  out.recall = l / static_cast<double>(r.size());
  out.f1 = 2 * out.precision * out.recall / (out.precision + out.recall);
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::invalid_argument, "quantile of an empty sample");
  if (q < 0 || q > 1) throw Error(ErrorCode::invalid_argument, "quantile outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values[lo];
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

Spread spread(const std::vector<double>& values) {
  if (values.empty()) return {};
  return Spread{quantile(values, 0.5), quantile(values, 0.25), quantile(values, 0.75), values.size()};
}

std::vector<std::string> result_values(const StructuredEvidence& e) {
  std::vector<std::string> out;
  for (const auto& row : e.rows) {
    for (const auto& v : row) out.push_back(value_to_string(v));
  }
  return out;
}

namespace {

std::vector<Json> read_rows(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  const auto first = content.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && content[first] == '[') {
    try {
      return Json::parse(content).get<std::vector<Json>>();
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::dataset_format, path.string() + ": " + e.what());
    }
  }
  try {
    return read_jsonl(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::dataset_format, e.what());
  }
}

std::string scalar_text(const Json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number() || j.is_boolean() || j.is_null()) return value_to_string(value_from_json(j));
  throw std::invalid_argument("expected a scalar, got " + j.dump());
}

const Json* field(const Json& row, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    if (row.contains(n) && !row.at(n).is_null()) return &row.at(n);
  }
  return nullptr;
}

std::string required_text(const Json& row, std::initializer_list<const char*> names) {
  const Json* f = field(row, names);
  if (!f) throw std::invalid_argument("missing field '" + std::string(*names.begin()) + "'");
  return scalar_text(*f);
}

Gold gold_from(const Json& j) {
  if (j.is_array()) {
    std::vector<std::string> values;
    for (const auto& v : j) {
      // Result rows may arrive as nested arrays; flatten one level.
      if (v.is_array()) {
        for (const auto& cell : v) values.push_back(scalar_text(cell));
      } else {
        values.push_back(scalar_text(v));
      }
    }
    return values;
  }
  return scalar_text(j);
}

bool gold_empty(const Gold& g) {
  if (const auto* s = std::get_if<std::string>(&g)) return text::trim(*s).empty();
  return false;
}

BenchmarkItem fixture_item(const Json& row) {
  BenchmarkItem item;
  item.question.id = required_text(row, {"id"});
  item.question.text = required_text(row, {"question"});
  if (const Json* p = field(row, {"patient", "patient_id"})) item.question.patient_scope = scalar_text(*p);
  if (const Json* a = field(row, {"admission", "admission_id"})) item.question.admission_scope = scalar_text(*a);
  if (const Json* c = field(row, {"category"})) item.question.category = parse_category(c->get<std::string>());
  if (const Json* f = field(row, {"time_from"})) item.question.window_from = parse_instant(f->get<std::string>());
  if (const Json* t = field(row, {"time_to"})) item.question.window_to = parse_instant(t->get<std::string>());
  if (const Json* s = field(row, {"sections"})) item.question.section_hints = s->get<std::vector<std::string>>();
  if (const Json* m = field(row, {"modality"})) item.modality = parse_modality(m->get<std::string>());
  if (const Json* q = field(row, {"gold_sql"})) item.gold_sql = q->get<std::string>();
  if (const Json* g = field(row, {"gold"})) item.gold = gold_from(*g);
  else if (!item.gold_sql) throw std::invalid_argument("missing field 'gold'");
  return item;
}

BenchmarkItem sql_item(const Json& row, std::size_t n, const std::string& profile) {
  BenchmarkItem item;
  const Json* id = field(row, {"id", "question_id"});
  item.question.id = id ? scalar_text(*id) : profile + "-" + std::to_string(n);
  item.question.text = required_text(row, {"question", "Question"});
  item.modality = Modality::structured;
  if (const Json* q = field(row, {"query", "SQL", "sql", "gold_sql"})) item.gold_sql = q->get<std::string>();
  if (const Json* p = field(row, {"patient", "patient_id", "subject_id"})) item.question.patient_scope = scalar_text(*p);
  if (const Json* a = field(row, {"admission", "hadm_id"})) item.question.admission_scope = scalar_text(*a);
  if (const Json* g = field(row, {"answer", "Answer", "value", "gold"})) item.gold = gold_from(*g);
  else if (!item.gold_sql) throw std::invalid_argument("missing field 'answer'");
  return item;
}

BenchmarkItem ehrnoteqa_item(const Json& row, std::size_t n) {
  BenchmarkItem item;
  const Json* id = field(row, {"id", "question_id"});
  item.question.id = id ? scalar_text(*id) : "ehrnoteqa-" + std::to_string(n);
  item.question.text = required_text(row, {"question"});
  item.question.patient_scope = required_text(row, {"patient_id", "patient", "subject_id"});
  item.modality = Modality::unstructured;
  std::string key = required_text(row, {"answer", "answer_key"});
  key = std::string(text::trim(key));
  // Accept "A", "(A)", "A." and "choice_A".
  if (text::starts_with_icase(key, "choice_")) key = key.substr(7);
  std::erase_if(key, [](char c) { return c == '(' || c == ')' || c == '.' || c == ' '; });
  if (key.size() != 1 || std::toupper(static_cast<unsigned char>(key[0])) < 'A' ||
      std::toupper(static_cast<unsigned char>(key[0])) > 'E') {
    throw std::invalid_argument("answer key must be one of A-E, got '" + key + "'");
  }
  const char letter = static_cast<char>(std::toupper(static_cast<unsigned char>(key[0])));
  const std::string choice_field = std::string("choice_") + letter;
  const Json* choice = field(row, {choice_field.c_str()});
  if (!choice) {
    if (const Json* choices = field(row, {"choices"}); choices && choices->is_object()) {
      const std::string lk(1, letter);
      if (choices->contains(lk)) choice = &choices->at(lk);
    } else if (choices && choices->is_array() && static_cast<std::size_t>(letter - 'A') < choices->size()) {
      choice = &choices->at(static_cast<std::size_t>(letter - 'A'));
    }
  }
  if (!choice) throw std::invalid_argument("answer key " + std::string(1, letter) + " names no choice");
  item.gold = scalar_text(*choice);
  return item;
}

}  // namespace

LoadResult load_dataset(const std::filesystem::path& path, const LoadOptions& options) {
  if (!is_known_profile(options.profile)) throw Error(ErrorCode::invalid_argument, "unknown profile: " + options.profile);
  const auto rows = read_rows(path);
  LoadResult out;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t n = i + 1;
    auto row_error = [&](const std::string& what) {
      return Error(ErrorCode::dataset_format, path.string() + ": row " + std::to_string(n) + ": " + what);
    };
    BenchmarkItem item;
    try {
      if (!rows[i].is_object()) throw std::invalid_argument("row is not an object");
      if (options.profile == "ehrnoteqa") item = ehrnoteqa_item(rows[i], n);
      else if (options.profile == "ehrsql" || options.profile == "drugehrqa") item = sql_item(rows[i], n, options.profile);
      else item = fixture_item(rows[i]);
      validate(item.question);
    } catch (const Error& e) {
      throw row_error(e.what());
    } catch (const std::exception& e) {
      throw row_error(e.what());
    }
    item.profile = options.profile;
    if (!ids.insert(item.question.id).second) throw row_error("duplicate id " + item.question.id);

    const bool gold_missing = std::holds_alternative<std::string>(item.gold) && std::get<std::string>(item.gold).empty();
    if (item.gold_sql && options.gold_db && (options.drop_gold_sql_timeouts || gold_missing)) {
      const double timeout = options.drop_gold_sql_timeouts ? options.gold_sql_timeout_s : sql::kDefaultTimeoutS;
      Question scope;
      scope.patient_scope = item.question.patient_scope;
      scope.admission_scope = item.question.admission_scope;
      const auto outcome = options.gold_db->execute(*item.gold_sql, structured::scope_params(scope), timeout);
      if (outcome.error == sql::ErrorClass::timeout && options.drop_gold_sql_timeouts) {
        ++out.dropped_gold_sql_timeouts;
        out.dropped_ids.push_back(item.question.id);
        continue;
      }
      if (gold_missing) {
        if (!outcome.ok()) throw row_error("gold SQL failed (" + sql::to_string(*outcome.error) + "): " + outcome.message);
        StructuredEvidence e;
        e.rows = outcome.result->rows;
        item.gold = result_values(e);
      }
    }
    if (gold_empty(item.gold)) throw row_error("missing gold answer");
    out.items.push_back(std::move(item));
  }
  if (out.dropped_gold_sql_timeouts > 0) {
    std::clog << "ehrnav: dropped " << out.dropped_gold_sql_timeouts << " item(s) whose gold SQL exceeded "
              << options.gold_sql_timeout_s << " s\n";
  }
  return out;
}

std::map<std::string, bool> load_verdicts(const std::filesystem::path& path) {
  std::map<std::string, bool> out;
  const std::string content = read_file(path);
  const auto first = content.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && content[first] == '{' && Json::accept(content)) {
      const Json whole = Json::parse(content);
      const bool single_record = whole.contains("id") && whole.contains("verdict") && whole.at("verdict").is_boolean();
      if (!single_record) {
        for (const auto& [id, v] : whole.items()) out[id] = v.get<bool>();
        return out;
      }
    }
    for (const auto& j : read_jsonl(path)) out[scalar_text(j.at("id"))] = j.at("verdict").get<bool>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::dataset_format, path.string() + ": " + e.what());
  }
  return out;
}

Aggregates aggregate(const std::vector<ItemResult>& items) {
  std::vector<const ItemResult*> sorted;
  for (const auto& i : items) sorted.push_back(&i);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });

  Aggregates a;
  std::vector<double> latencies;
  std::vector<double> f1s;
  std::map<std::string, std::vector<double>> cat_latencies;
  for (const auto* i : sorted) {
    ++a.n;
    if (i->correct) ++a.correct;
    if (i->error_class) ++a.errors;
    latencies.push_back(i->latency_ms);
    a.total_cost += i->cost;
    if (i->rouge) f1s.push_back(i->rouge->f1);
    auto& c = a.by_category[i->category];
    ++c.n;
    if (i->correct) ++c.correct;
    c.cost += i->cost;
    cat_latencies[i->category].push_back(i->latency_ms);
  }
  a.accuracy = a.n ? static_cast<double>(a.correct) / static_cast<double>(a.n) : 0.0;
  a.latency_ms = spread(latencies);
  if (!f1s.empty()) {
    double sum = 0;
    for (double f : f1s) sum += f;
    a.rouge_l_f1_mean = sum / static_cast<double>(f1s.size());
    a.rouge_l_f1_median = quantile(f1s, 0.5);
  }
  for (auto& [cat, lat] : cat_latencies) a.by_category[cat].latency_ms = spread(lat);
  return a;
}

RunReport run_benchmark(const std::vector<BenchmarkItem>& items, Navigator& navigator,
                        const BenchmarkOptions& options) {
  RunReport report;
  {
    // Setup: warm description cache and note indexes so that item results do
    // not depend on which item happens to run first.
    VirtualClock clock;
    TraceRecorder setup("eval:setup", "", clock);
    RunContext ctx{clock, setup};
    try {
      navigator.describe_schema(options.db_id, ctx);
    } catch (const Error&) {
      // Items hit the same failure and record it individually.
    }
    std::set<std::string> patients;
    for (const auto& item : items) {
      if (item.modality != Modality::structured && item.question.patient_scope) {
        patients.insert(*item.question.patient_scope);
      }
    }
    for (const auto& p : patients) {
      try {
        navigator.note_index(p, ctx);
      } catch (const Error&) {
      }
    }
  }

  report.items.resize(items.size());
  auto run_one = [&](std::size_t idx) {
    const BenchmarkItem& item = items[idx];
    ItemResult& r = report.items[idx];
    r.id = item.question.id;
    r.category = item.question.category ? to_string(*item.question.category) : "uncategorized";
    r.modality = item.modality;
    r.gold = item.gold;
    r.trace_id = "eval:" + item.question.id;

    VirtualClock virtual_clock;
    SteadyClock steady_clock;
    Clock& clock = options.virtual_clock ? static_cast<Clock&>(virtual_clock) : static_cast<Clock&>(steady_clock);
    TraceRecorder recorder(r.trace_id, item.question.id, clock);
    RunContext ctx{clock, recorder};

    AskOptions ask;
    ask.db_id = options.db_id;
    ask.profile = options.profile ? *options.profile : item.profile;
    ask.modality = item.modality;
    ask.synthesize = item.modality != Modality::structured;
    r.prediction = std::string();
    try {
      const AskResult result = navigator.ask(item.question, ask, ctx);
      if (result.structured_run) r.sql_attempts = static_cast<int>(result.structured_run->attempts.size());
      if (result.bundle.unstructured) r.fallback_mode = result.bundle.unstructured->fallback_mode;
      if (item.modality == Modality::structured) {
        r.prediction = result.bundle.structured ? result_values(*result.bundle.structured) : std::vector<std::string>{};
      } else {
        r.prediction = result.answer.response_section;
      }
    } catch (const Error& e) {
      r.error_class = std::string(to_string(e.code()));
      r.error_message = e.what();
    } catch (const std::exception& e) {
      r.error_class = "internal";
      r.error_message = e.what();
    }
    r.exact_match = r.error_class ? 0 : exact_match(r.prediction, r.gold);
    if (item.modality == Modality::unstructured) r.rouge = rouge_l(as_text(r.prediction), as_text(r.gold));
    r.correct = r.exact_match == 1;
    if (auto v = options.verdicts.find(r.id); v != options.verdicts.end()) {
      r.correct = v->second;
      r.verdict_source = "file";
    }
    r.trace = recorder.finish();
    r.latency_ms = r.trace.total_latency_ms;
    r.cost = r.trace.total_cost;
    r.prompt_tokens = r.trace.total_prompt_tokens();
    r.completion_tokens = r.trace.total_completion_tokens();
  };

  const std::size_t workers = std::clamp<std::size_t>(options.parallelism, 1, std::max<std::size_t>(1, items.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < items.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < items.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  report.aggregates = aggregate(report.items);
  const Profile& profile = builtin_profile(options.profile.value_or(items.empty() ? "fixture" : items.front().profile));
  const auto& cfg = navigator.config();
  report.config = Json{{"db_id", options.db_id},
                       {"profile", profile.name},
                       {"llm_backend", navigator.components().gateway->backend().id()},
                       {"embedding_backend", navigator.components().embedder->backend_id()},
                       {"table_k", cfg.table_k.value_or(profile.table_k)},
                       {"note_k", cfg.note_k.value_or(profile.note_k)},
                       {"chunk_size_tokens", cfg.chunking.chunk_size_tokens},
                       {"chunk_overlap_tokens", cfg.chunking.overlap_tokens},
                       {"sentence_aware", cfg.chunking.sentence_aware},
                       {"max_attempts", cfg.structured.max_attempts},
                       {"timeout_s", cfg.structured.timeout_s},
                       {"temperature", 0.0},
                       {"parallelism", workers},
                       {"virtual_clock", options.virtual_clock},
                       {"verdict_overrides", options.verdicts.size()}};
  return report;
}

Json to_json(const Gold& g) {
  if (const auto* s = std::get_if<std::string>(&g)) return *s;
  return std::get<std::vector<std::string>>(g);
}

namespace {

Json spread_json(const Spread& s) {
  if (s.n == 0) return nullptr;
  return Json{{"median", s.median}, {"q1", s.q1}, {"q3", s.q3}, {"n", s.n}};
}

Json aggregates_json(const Aggregates& a) {
  Json cats = Json::object();
  for (const auto& [name, c] : a.by_category) {
    cats[name] = Json{{"n", c.n}, {"correct", c.correct}, {"latency_ms", spread_json(c.latency_ms)}, {"cost", c.cost}};
  }
  Json rouge = nullptr;
  if (a.rouge_l_f1_mean) rouge = Json{{"f1_mean", *a.rouge_l_f1_mean}, {"f1_median", *a.rouge_l_f1_median}};
  return Json{{"n", a.n},
              {"correct", a.correct},
              {"errors", a.errors},
              {"accuracy", a.accuracy},
              {"rouge_l", rouge},
              {"bertscore", nullptr},
              {"bartscore", nullptr},
              {"latency_ms", spread_json(a.latency_ms)},
              {"total_cost", a.total_cost},
              {"by_category", std::move(cats)}};
}

bool same(const Spread& a, const Spread& b) {
  return a.n == b.n && a.median == b.median && a.q1 == b.q1 && a.q3 == b.q3;
}

}  // namespace

void check_consistency(const RunReport& report) {
  const Aggregates again = aggregate(report.items);
  const Aggregates& a = report.aggregates;
  bool ok = a.n == again.n && a.correct == again.correct && a.errors == again.errors && a.accuracy == again.accuracy &&
            a.rouge_l_f1_mean == again.rouge_l_f1_mean && a.rouge_l_f1_median == again.rouge_l_f1_median &&
            same(a.latency_ms, again.latency_ms) && a.total_cost == again.total_cost &&
            a.by_category.size() == again.by_category.size();
  for (const auto& [name, c] : a.by_category) {
    auto it = again.by_category.find(name);
    ok = ok && it != again.by_category.end() && it->second.n == c.n && it->second.correct == c.correct &&
         same(it->second.latency_ms, c.latency_ms) && it->second.cost == c.cost;
  }
  if (!ok) throw Error(ErrorCode::invalid_argument, "report aggregates do not match the per-item rows");
}

std::string report_json(const RunReport& report) {
  check_consistency(report);
  Json items = Json::array();
  for (const auto& r : report.items) {
    Json rouge = nullptr;
    if (r.rouge) rouge = Json{{"precision", r.rouge->precision}, {"recall", r.rouge->recall}, {"f1", r.rouge->f1}};
    Json error = nullptr;
    if (r.error_class) error = Json{{"class", *r.error_class}, {"message", r.error_message}};
    items.push_back(Json{{"id", r.id},
                         {"category", r.category},
                         {"modality", to_string(r.modality)},
                         {"prediction", to_json(r.prediction)},
                         {"gold", to_json(r.gold)},
                         {"exact_match", r.exact_match},
                         {"rouge_l", rouge},
                         {"correct", r.correct},
                         {"verdict_source", r.verdict_source},
                         {"latency_ms", r.latency_ms},
                         {"cost", r.cost},
                         {"prompt_tokens", r.prompt_tokens},
                         {"completion_tokens", r.completion_tokens},
                         {"sql_attempts", r.sql_attempts},
                         {"fallback_mode", r.fallback_mode ? Json(*r.fallback_mode) : Json(nullptr)},
                         {"error", error},
                         {"trace_id", r.trace_id},
                         {"trace", r.trace}});
  }
  const Json out{{"format", "ehrnav.report"},
                 {"version", 1},
                 {"quartile_convention", "linear interpolation between closest ranks, inclusive"},
                 {"config", report.config},
                 {"aggregates", aggregates_json(report.aggregates)},
                 {"items", std::move(items)}};
  return out.dump(2) + "\n";
}

std::string summary_table(const RunReport& report) {
  const Aggregates& a = report.aggregates;
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "accuracy %zu/%zu (%.4f), errors %zu, total cost %.6f\n", a.correct, a.n, a.accuracy,
                a.errors, a.total_cost);
  out += buf;
  if (a.rouge_l_f1_mean) {
    std::snprintf(buf, sizeof buf, "rouge-l f1 mean %.4f, median %.4f\n", *a.rouge_l_f1_mean, *a.rouge_l_f1_median);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-22s %5s %8s %12s %12s %12s %10s\n", "category", "n", "correct", "median_ms",
                "q1_ms", "q3_ms", "cost");
  out += buf;
  auto row = [&](const std::string& name, std::size_t n, std::size_t correct, const Spread& s, double cost) {
    std::snprintf(buf, sizeof buf, "%-22s %5zu %8zu %12.1f %12.1f %12.1f %10.6f\n", name.c_str(), n, correct, s.median,
                  s.q1, s.q3, cost);
    out += buf;
  };
  for (const auto& [name, c] : a.by_category) row(name, c.n, c.correct, c.latency_ms, c.cost);
  row("all", a.n, a.correct, a.latency_ms, a.total_cost);
  return out;
}

}  // namespace ehrnav::eval
