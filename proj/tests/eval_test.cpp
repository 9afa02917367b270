#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>

#include "ehrnav/error.hpp"
#include "ehrnav/eval.hpp"
#include "support.hpp"

using namespace ehrnav;
using namespace ehrnav::eval;
namespace th = ehrnav::testing;

namespace {

using Strings = std::vector<std::string>;

// Textbook O(nm) LCS table, kept separate from the library's rolling row.
std::size_t lcs_oracle(const Strings& a, const Strings& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
    }
  }
  return t[a.size()][b.size()];
}

double f1_oracle(const Strings& p, const Strings& r) {
  if (p.empty() || r.empty()) return 0.0;
  const double l = static_cast<double>(lcs_oracle(p, r));
  if (l == 0) return 0.0;
  const double prec = l / static_cast<double>(p.size());
  const double rec = l / static_cast<double>(r.size());
  return 2 * prec * rec / (prec + rec);
}

std::string join(const Strings& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + s[i];
  return out;
}

bool same_spread(const Spread& a, const Spread& b) {
  return a.n == b.n && a.median == b.median && a.q1 == b.q1 && a.q3 == b.q3;
}

LoadResult load_fixture_benchmark() { return load_dataset(th::fixture("benchmark.jsonl"), LoadOptions{}); }

th::NavigatorParts benchmark_navigator(std::vector<llm::ScriptRule> rules) {
  return th::make_navigator(std::move(rules), th::fixture_db("mimic_demo"));
}

std::vector<llm::ScriptRule> benchmark_rules() {
  return llm::ScriptedBackend::load_rules(th::fixture("benchmark_script.jsonl"));
}

RunReport run_fixture(std::vector<llm::ScriptRule> rules, std::vector<BenchmarkItem> items, std::size_t parallelism = 1) {
  auto parts = benchmark_navigator(std::move(rules));
  BenchmarkOptions options;
  options.db_id = "mimic_demo";
  options.parallelism = parallelism;
  return run_benchmark(items, *parts.navigator, options);
}

}  // namespace

TEST(ExactMatch, Examples) {
  EXPECT_EQ(exact_match(std::string("81mg"), std::string("81 mg")), 0);
  EXPECT_EQ(exact_match(std::string("  Aspirin\n81  MG "), std::string("aspirin 81 mg")), 1);
  EXPECT_EQ(exact_match(Strings{"b", "a"}, Strings{"A", "B", "a"}), 1);
  EXPECT_EQ(exact_match(Strings{"a"}, Strings{"a", "b"}), 0);
  EXPECT_EQ(exact_match(std::string("0.45"), Strings{"0.45"}), 1);
  EXPECT_EQ(exact_match(Strings{}, Strings{}), 1);
  EXPECT_EQ(exact_match(std::string("Stra\xc3\x9f" "e"), std::string("STRASSE")), 1);
}

TEST(ExactMatch, SymmetricOnRandomPairs) {
  auto g = th::rng(5);
  const Strings pool{"a", "A", " a", "b", "81 mg", "81mg", "81  MG", "\xc3\xa9", "e\xcc\x81"};
  for (int i = 0; i < 500; ++i) {
    auto pick = [&]() -> Gold {
      if (g() % 2) return pool[g() % pool.size()];
      Strings v;
      for (std::size_t n = g() % 4; n > 0; --n) v.push_back(pool[g() % pool.size()]);
      return v;
    };
    const Gold x = pick(), y = pick();
    EXPECT_EQ(exact_match(x, y), exact_match(y, x));
    EXPECT_EQ(exact_match(x, x), 1);
  }
}

TEST(Rouge, HandCheckedCase) {
  const auto r = rouge_l("the cat sat", "the cat ran");
  EXPECT_NEAR(r.precision, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.recall, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-12);
  EXPECT_EQ(rouge_l("", "x").f1, 0.0);
  EXPECT_EQ(rouge_l("a b", "c d").f1, 0.0);
  EXPECT_NEAR(rouge_l("The CAT", "the cat").f1, 1.0, 1e-15);
}

TEST(Rouge, MatchesDpOracleOnRandomPairs) {
  auto g = th::rng(9);
  const Strings vocab{"the", "cat", "sat", "ran", "on", "mat", "aspirin", "81", "mg", "daily", "x"};
  for (int i = 0; i < 500; ++i) {
    Strings p, r;
    for (std::size_t n = g() % 40; n > 0; --n) p.push_back(vocab[g() % vocab.size()]);
    for (std::size_t n = g() % 40; n > 0; --n) r.push_back(vocab[g() % vocab.size()]);
    ASSERT_EQ(lcs_length(p, r), lcs_oracle(p, r));
    ASSERT_NEAR(rouge_l(join(p), join(r)).f1, f1_oracle(p, r), 1e-12) << join(p) << " | " << join(r);
  }
}

TEST(Quantile, LinearInclusive) {
  const std::vector<double> v{5, 1, 4, 2, 3};
  EXPECT_DOUBLE_EQ(quantile(v, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.25), 2.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.75), 4.0);
  EXPECT_DOUBLE_EQ(quantile(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(v, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.25), 1.75);
  EXPECT_DOUBLE_EQ(quantile({7}, 0.9), 7.0);
  EXPECT_THROW(quantile({}, 0.5), Error);
  EXPECT_THROW(quantile({1}, 1.5), Error);
  const auto s = spread(v);
  EXPECT_EQ(s.n, 5u);
  EXPECT_DOUBLE_EQ(s.q1, 2.0);
}

TEST(Loader, FixtureBenchmark) {
  const auto loaded = load_fixture_benchmark();
  ASSERT_EQ(loaded.items.size(), 20u);
  std::size_t structured = 0, unstructured = 0, multimodal = 0;
  for (const auto& i : loaded.items) {
    structured += i.modality == Modality::structured;
    unstructured += i.modality == Modality::unstructured;
    multimodal += i.modality == Modality::multimodal;
  }
  EXPECT_EQ(structured, 8u);
  EXPECT_EQ(multimodal, 8u);
  EXPECT_EQ(unstructured, 4u);
  EXPECT_EQ(std::get<Strings>(loaded.items[0].gold), Strings{"0.45"});
  EXPECT_EQ(loaded.items[0].question.admission_scope, "142345");
}

TEST(Loader, EhrNoteQaGoldIsKeyedChoiceText) {
  LoadOptions o;
  o.profile = "ehrnoteqa";
  const auto loaded = load_dataset(th::test_data("ehrnoteqa.jsonl"), o);
  ASSERT_EQ(loaded.items.size(), 4u);
  EXPECT_EQ(std::get<std::string>(loaded.items[0].gold), "325 mg daily");
  EXPECT_EQ(std::get<std::string>(loaded.items[1].gold), "Pneumonia");
  EXPECT_EQ(std::get<std::string>(loaded.items[2].gold), "The family");
  EXPECT_EQ(std::get<std::string>(loaded.items[3].gold), "Aspirin");
  EXPECT_EQ(loaded.items[0].question.patient_scope, "10006");
  EXPECT_EQ(loaded.items[0].question.id, "ehrnoteqa-1");
  EXPECT_EQ(loaded.items[2].question.id, "custom-3");
  EXPECT_EQ(loaded.items[0].modality, Modality::unstructured);
}

TEST(Loader, MalformedRowsNameTheRow) {
  th::TempDir dir;
  auto expect_row_error = [&](const std::string& content, const std::string& profile, const std::string& needle) {
    write_file(dir / "d.jsonl", content);
    LoadOptions o;
    o.profile = profile;
    try {
      load_dataset(dir / "d.jsonl", o);
      ADD_FAILURE() << "expected an error for " << content;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::dataset_format);
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_row_error("{\"id\":\"a\",\"question\":\"q\",\"gold\":\"x\"}\n{\"id\":\"b\",\"question\":\"q\"}\n", "fixture",
                   "row 2: missing field 'gold'");
  expect_row_error("{\"id\":\"a\",\"question\":\"q\",\"gold\":\"\"}\n", "fixture", "row 1: missing gold");
  expect_row_error("{\"id\":\"a\",\"question\":\"  \",\"gold\":\"x\"}\n", "fixture", "row 1");
  expect_row_error("{\"id\":\"a\",\"question\":\"q\",\"gold\":\"x\"}\n{\"id\":\"a\",\"question\":\"q\",\"gold\":\"x\"}\n",
                   "fixture", "row 2: duplicate id");
  expect_row_error("{\"patient_id\":1,\"question\":\"q\",\"choice_A\":\"x\",\"answer\":\"F\"}\n", "ehrnoteqa", "row 1");
  expect_row_error("{\"patient_id\":1,\"question\":\"q\",\"choice_A\":\"x\",\"answer\":\"B\"}\n", "ehrnoteqa",
                   "names no choice");
  expect_row_error("[1]", "ehrsql", "row 1: row is not an object");
  EXPECT_THROW(load_dataset(dir / "d.jsonl", LoadOptions{"mimic5"}), Error);
}

TEST(Loader, GoldSqlTimeoutIsDroppedAndCounted) {
  const auto db = sql::Database::open(th::fixture_db("mimic_demo"), "mimic_demo");
  LoadOptions o;
  o.profile = "ehrsql";
  o.gold_db = &db;
  o.drop_gold_sql_timeouts = true;
  o.gold_sql_timeout_s = 1.0;
  const auto started = std::chrono::steady_clock::now();
  const auto loaded = load_dataset(th::test_data("ehrsql_timeout.jsonl"), o);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(), 5.0);
  EXPECT_EQ(loaded.dropped_gold_sql_timeouts, 1u);
  EXPECT_EQ(loaded.dropped_ids, Strings{"t2"});
  ASSERT_EQ(loaded.items.size(), 2u);
  EXPECT_EQ(std::get<Strings>(loaded.items[0].gold), Strings{"3"});
  // Missing gold is computed from the gold SQL.
  EXPECT_EQ(std::get<Strings>(loaded.items[1].gold), Strings{"F"});

  // Without a database t3's gold cannot be computed.
  try {
    load_dataset(th::test_data("ehrsql_timeout.jsonl"), LoadOptions{"ehrsql", nullptr, false, 1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 3: missing gold"), std::string::npos) << e.what();
  }
}

TEST(Verdicts, ObjectAndLines) {
  th::TempDir dir;
  write_file(dir / "a.json", "{\n  \"s01\": true,\n  \"u01\": false\n}\n");
  write_file(dir / "b.jsonl", "{\"id\": \"s01\", \"verdict\": false}\n");
  EXPECT_EQ(load_verdicts(dir / "a.json"), (std::map<std::string, bool>{{"s01", true}, {"u01", false}}));
  EXPECT_EQ(load_verdicts(dir / "b.jsonl"), (std::map<std::string, bool>{{"s01", false}}));
}

TEST(Benchmark, FixtureIsPerfectAndByteStable) {
  const auto items = load_fixture_benchmark().items;
  const auto started = std::chrono::steady_clock::now();
  std::vector<std::string> reports;
  for (int run = 0; run < 3; ++run) reports.push_back(report_json(run_fixture(benchmark_rules(), items)));
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count(), 30.0);
  EXPECT_EQ(reports[0], reports[1]);
  EXPECT_EQ(reports[1], reports[2]);

  const auto report = run_fixture(benchmark_rules(), items);
  for (const auto& r : report.items) {
    EXPECT_TRUE(r.correct) << r.id << ": " << to_json(r.prediction).dump() << " vs " << to_json(r.gold).dump() << " "
                           << r.error_message;
  }
  EXPECT_EQ(report.aggregates.correct, 20u);
  EXPECT_EQ(report.aggregates.errors, 0u);
  EXPECT_DOUBLE_EQ(report.aggregates.accuracy, 1.0);
  EXPECT_EQ(th::check_golden("benchmark_report.json", reports[0]), "");
}

TEST(Benchmark, RepairAndFallbackAreVisible) {
  const auto report = run_fixture(benchmark_rules(), load_fixture_benchmark().items);
  std::map<std::string, const ItemResult*> by_id;
  for (const auto& r : report.items) by_id[r.id] = &r;
  EXPECT_EQ(by_id.at("s05")->sql_attempts, 2);
  EXPECT_EQ(by_id.at("m08")->sql_attempts, 3);
  EXPECT_EQ(by_id.at("m08")->fallback_mode, true);
  EXPECT_EQ(by_id.at("m01")->fallback_mode, false);
  EXPECT_FALSE(by_id.at("s01")->fallback_mode.has_value());
  EXPECT_TRUE(by_id.at("u01")->rouge.has_value());
  EXPECT_FALSE(by_id.at("m01")->rouge.has_value());
  // Latency is the sum of scripted step latencies under the virtual clock.
  double sum = 0;
  for (const auto& s : by_id.at("s01")->trace.steps) sum += s.wall_ms;
  EXPECT_DOUBLE_EQ(by_id.at("s01")->latency_ms, sum);
  EXPECT_DOUBLE_EQ(by_id.at("s01")->latency_ms, 1100.0);
}

TEST(Benchmark, ExhaustedScriptFailsOneItemOnly) {
  auto rules = benchmark_rules();
  const auto before = rules.size();
  std::erase_if(rules, [](const llm::ScriptRule& r) {
    return r.role_tag == llm::RoleTag::answer_synthesizer && !r.patterns.empty() &&
           r.patterns[0].find("chest radiograph of patient 10006") != std::string::npos;
  });
  ASSERT_EQ(rules.size(), before - 1);
  const auto report = run_fixture(rules, load_fixture_benchmark().items);
  EXPECT_EQ(report.aggregates.correct, 19u);
  EXPECT_EQ(report.aggregates.errors, 1u);
  for (const auto& r : report.items) {
    if (r.id == "u01") {
      EXPECT_EQ(r.error_class, "script_exhausted");
      EXPECT_FALSE(r.correct);
    }
  }
  EXPECT_NO_THROW(report_json(report));
}

TEST(Benchmark, OrderAndParallelismOnlyPermuteRows) {
  auto items = load_fixture_benchmark().items;
  const auto base = run_fixture(benchmark_rules(), items);
  auto g = th::rng(21);
  std::shuffle(items.begin(), items.end(), g);
  const auto shuffled = run_fixture(benchmark_rules(), items, 4);

  EXPECT_EQ(shuffled.aggregates.correct, base.aggregates.correct);
  EXPECT_EQ(shuffled.aggregates.total_cost, base.aggregates.total_cost);
  EXPECT_TRUE(same_spread(shuffled.aggregates.latency_ms, base.aggregates.latency_ms));
  std::map<std::string, std::string> a, b;
  for (const auto& r : base.items) a[r.id] = to_line(r.trace) + to_json(r.prediction).dump();
  for (const auto& r : shuffled.items) b[r.id] = to_line(r.trace) + to_json(r.prediction).dump();
  EXPECT_EQ(a, b);
}

TEST(Report, VerdictOverridesAndConsistencyCheck) {
  auto parts = benchmark_navigator(benchmark_rules());
  BenchmarkOptions options;
  options.db_id = "mimic_demo";
  options.verdicts = {{"s01", false}};
  auto report = run_benchmark(load_fixture_benchmark().items, *parts.navigator, options);
  EXPECT_EQ(report.aggregates.correct, 19u);
  const auto json = Json::parse(report_json(report));
  EXPECT_EQ(json.at("format"), "ehrnav.report");
  EXPECT_TRUE(json.at("aggregates").at("bertscore").is_null());
  EXPECT_EQ(json.at("items")[0].at("verdict_source"), "file");

  report.aggregates.correct = 20;
  EXPECT_THROW(report_json(report), Error);
  EXPECT_FALSE(summary_table(report).empty());
}
