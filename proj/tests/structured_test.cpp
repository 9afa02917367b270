#include <gtest/gtest.h>

#include "ehrnav/error.hpp"
#include "ehrnav/structured.hpp"
#include "support.hpp"

using namespace ehrnav;
using namespace ehrnav::structured;
using llm::RoleTag;
namespace th = ehrnav::testing;

namespace {

struct Rig {
  explicit Rig(std::vector<llm::ScriptRule> rules, const std::filesystem::path& path = th::fixture_db("mimic_demo"))
      : db(sql::Database::open(path, "mimic_demo")),
        gateway(std::make_shared<llm::ScriptedBackend>(std::move(rules))),
        embedder(std::make_shared<embed::HashEmbedding>()),
        selector(embedder) {}

  StructuredRun run(const Question& q, StructuredConfig config = {}) {
    th::Ctx c;
    auto r = run_structured_pipeline(q, StructuredDeps{db, gateway, selector, cache, prompts, builtin_profile("fixture")},
                                     config, c.ctx);
    steps = c.trace.steps();
    return r;
  }

  sql::Database db;
  llm::Gateway gateway;
  embed::Embedder embedder;
  TableSelector selector;
  DescriptionCache cache;
  PromptLibrary prompts;
  std::vector<TraceStep> steps;
};

std::vector<llm::ScriptRule> with_reviewers(std::vector<llm::ScriptRule> rules) {
  auto all = th::reviewer_rules();
  all.insert(all.end(), rules.begin(), rules.end());
  return all;
}

Question question(std::string text, std::optional<std::string> patient = "10006") {
  Question q;
  q.id = "q";
  q.text = std::move(text);
  q.patient_scope = std::move(patient);
  return q;
}

}  // namespace

TEST(ExtractSql, AllReplyShapes) {
  EXPECT_EQ(extract_sql("SQLQuery: SELECT 1\nSQLResult: x", SqlReplyFormat::sqlquery_line), "SELECT 1");
  EXPECT_EQ(extract_sql("Here:\n```sql\nSELECT a FROM t;\n```\nDone", SqlReplyFormat::sqlquery_line), "SELECT a FROM t");
  EXPECT_EQ(extract_sql("{\"SQL\": \"SELECT \\\"x\\\" FROM t\"}", SqlReplyFormat::json_object), "SELECT \"x\" FROM t");
  EXPECT_EQ(extract_sql("Answer follows {\"note\": \"}\", \"sql\": \"SELECT 2\"}", SqlReplyFormat::json_object), "SELECT 2");
  EXPECT_EQ(extract_sql("  with x as (select 1) select * from x  ", SqlReplyFormat::fenced_block),
            "with x as (select 1) select * from x");
  EXPECT_EQ(extract_sql("SQLQuery: ```sql\nSELECT 3\n```", SqlReplyFormat::sqlquery_line), "SELECT 3");
}

TEST(ExtractSql, PreferredShapeWins) {
  const std::string reply = "```sql\nSELECT 2\n```\nSQLQuery: SELECT 1";
  EXPECT_EQ(extract_sql(reply, SqlReplyFormat::sqlquery_line), "SELECT 1");
  EXPECT_EQ(extract_sql(reply, SqlReplyFormat::fenced_block), "SELECT 2");
}

TEST(ExtractSql, FailuresAreClassified) {
  auto code_of = [](std::string_view reply) {
    try {
      extract_sql(reply, SqlReplyFormat::sqlquery_line);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::io;
  };
  EXPECT_EQ(code_of("I cannot answer that."), ErrorCode::sql_extraction);
  EXPECT_EQ(code_of("SQLQuery:   "), ErrorCode::sql_extraction);
  EXPECT_EQ(code_of("SQLQuery: SELECT 1; DROP TABLE patients"), ErrorCode::multi_statement);
}

TEST(SchemaBlock, RendersTablesScopeAndFailures) {
  TableRef t{"rx", {{"id", "INTEGER"}, {"drug", "TEXT"}, {"note", ""}}, {"id"}, {{"id", "adm", "hadm_id"}}};
  TableSample s{"rx", {"id", "drug", "note"}, std::vector<Value>{Value{std::int64_t{1}}, Value{std::string("aspirin")}, Value{}}};
  TableRef u{"empty", {{"a", "TEXT"}}, {}, {}};
  TableSample e{"empty", {"a"}, std::nullopt};
  Question q = question("x");
  q.admission_scope = "5";
  SqlAttempt failed;
  failed.attempt_number = 1;
  failed.sql = "SELECT bad FROM rx";
  failed.outcome = AttemptOutcome::schema_error;
  failed.message = "no such column: bad";
  const auto block = render_schema_block(
      q, {{t, s, {"rx", "Orders.", "fp"}}, {u, e, {"empty", "Nothing.", "fp2"}}}, {failed});
  EXPECT_EQ(block,
            "Table: rx\n"
            "Description: Orders.\n"
            "Columns: id INTEGER, drug TEXT, note\n"
            "Primary keys: id\n"
            "Foreign keys: id -> adm.hadm_id\n"
            "Sample row: id=1; drug=aspirin; note=NULL\n"
            "\n"
            "Table: empty\n"
            "Description: Nothing.\n"
            "Columns: a TEXT\n"
            "Primary keys: None\n"
            "Foreign keys: None\n"
            "Sample row: (table is empty)\n"
            "\n"
            "Bound parameters available to the query: :patient_id (the patient in scope), :admission_id (the "
            "admission in scope)\n"
            "\n"
            "Previous attempt failed:\n"
            "Attempt: 1\n"
            "SQL: SELECT bad FROM rx\n"
            "Error (schema_error): no such column: bad");
}

TEST(ScopeParams, NumericScopesBindAsIntegers) {
  Question q = question("x", "10006");
  q.admission_scope = "abc";
  const auto p = scope_params(q);
  EXPECT_EQ(p.at("patient_id"), Value{std::int64_t{10006}});
  EXPECT_EQ(p.at("admission_id"), Value{std::string("abc")});
}

TEST(DescriptionCache, ColdThenWarmThenAltered) {
  th::TempDir dir;
  const auto copy = dir / "copy.db";
  std::filesystem::copy_file(th::fixture_db("mimic_demo"), copy);
  Rig rig(th::reviewer_rules(), copy);
  PromptLibrary prompts;
  auto describe_all = [&](const sql::Database& db) {
    th::Ctx c;
    for (const auto& t : discover_schema(db).tables) describe_table(t, "mimic_demo", rig.gateway, prompts, rig.cache, c.ctx);
  };
  describe_all(rig.db);
  describe_all(rig.db);
  EXPECT_EQ(rig.gateway.call_count(RoleTag::table_reviewer), 4);

  th::exec_writable(copy, "ALTER TABLE labevents ADD COLUMN specimen TEXT;");
  const auto reopened = sql::Database::open(copy, "mimic_demo");
  describe_all(reopened);
  describe_all(reopened);
  EXPECT_EQ(rig.gateway.call_count(RoleTag::table_reviewer), 5);
  EXPECT_TRUE(rig.cache.latest("mimic_demo", "labevents").has_value());
}

TEST(DescriptionCache, PersistsAcrossInstances) {
  th::TempDir dir;
  const auto file = dir / "descriptions.jsonl";
  {
    DescriptionCache cache(file);
    cache.store("db", {"t", "A table.", "fp1"});
    cache.store("db", {"t", "A changed table.", "fp2"});
  }
  DescriptionCache reloaded(file);
  EXPECT_EQ(reloaded.lookup("db", "t", "fp1")->description, "A table.");
  EXPECT_EQ(reloaded.latest("db", "t")->description, "A changed table.");
  EXPECT_FALSE(reloaded.lookup("other", "t", "fp1").has_value());
}

TEST(DescribeTable, EchoedLabelStrippedAndEmptyRejected) {
  auto rules = std::vector<llm::ScriptRule>{th::rule(RoleTag::table_reviewer, {"Table Name: patients\n"}, "Description:  People.  "),
                                            th::rule(RoleTag::table_reviewer, {}, "   ")};
  Rig rig(rules);
  th::Ctx c;
  const auto tables = discover_schema(rig.db).tables;
  const TableRef& patients = *std::find_if(tables.begin(), tables.end(), [](auto& t) { return t.name == "patients"; });
  const TableRef& labs = *std::find_if(tables.begin(), tables.end(), [](auto& t) { return t.name == "labevents"; });
  EXPECT_EQ(describe_table(patients, "mimic_demo", rig.gateway, rig.prompts, rig.cache, c.ctx).description, "People.");
  try {
    describe_table(labs, "mimic_demo", rig.gateway, rig.prompts, rig.cache, c.ctx);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_description);
  }
  EXPECT_FALSE(rig.cache.lookup("mimic_demo", "labevents", fingerprint_schema(labs)).has_value());
}

TEST(TableSelector, IdenticalDescriptionsTieByName) {
  embed::Embedder embedder(std::make_shared<embed::HashEmbedding>());
  const std::vector<TableDescription> ds{{"zeta", "Same words.", "f"}, {"alpha", "Same words.", "f"},
                                         {"mid", "Same words.", "f"}};
  const auto top = select_tables(question("Same words?"), ds, 2, embedder);
  EXPECT_EQ(top, (std::vector<std::string>{"alpha", "mid"}));
  EXPECT_EQ(select_tables(question("x"), ds, 10, embedder).size(), 3u);
}

TEST(TableSelector, EmbedsEachDistinctTextOnce) {
  embed::Embedder embedder(std::make_shared<embed::HashEmbedding>());
  TableSelector selector(embedder);
  const std::vector<TableDescription> ds{{"a", "One.", "f"}, {"b", "Two.", "f"}, {"c", "One.", "f"}};
  selector.rank(question("q1"), ds, 3);
  selector.rank(question("q2"), ds, 3);
  EXPECT_EQ(embedder.call_count(), 4);  // two descriptions, two questions
}

TEST(Pipeline, RepairLoopSucceedsOnThirdAttempt) {
  const std::string q = "Question: How many admissions?\n";
  Rig rig(with_reviewers({
      th::rule(RoleTag::sql_writer, {q, "Attempt: 2\n"}, "SQLQuery: SELECT count(*) FROM admissions WHERE subject_id = :patient_id"),
      th::rule(RoleTag::sql_writer, {q, "Attempt: 1\n"}, "SQLQuery: SELECT count(*) FROM admission"),
      th::rule(RoleTag::sql_writer, {q}, "SQLQuery: SELECT count(admit_id) FROM admissions"),
  }));
  const auto run = rig.run(question("How many admissions?"));
  ASSERT_TRUE(run.evidence.has_value());
  EXPECT_EQ(run.evidence->attempt_count, 3);
  EXPECT_EQ(value_to_string(run.evidence->rows[0][0]), "2");
  ASSERT_EQ(run.attempts.size(), 3u);
  EXPECT_EQ(run.attempts[0].outcome, AttemptOutcome::schema_error);
  EXPECT_EQ(run.attempts[1].outcome, AttemptOutcome::schema_error);
  EXPECT_EQ(run.attempts[2].outcome, AttemptOutcome::rows);
  EXPECT_EQ(rig.gateway.call_count(RoleTag::sql_writer), 3);

  std::vector<std::string> tools;
  for (const auto& s : rig.steps) tools.push_back(s.agent + "/" + s.tool);
  const std::vector<std::string> want{
      "table_reviewer/schema_discovery", "table_reviewer/description_cache", "table_reviewer/llm:scripted",
      "table_reviewer/llm:scripted",     "table_reviewer/llm:scripted",      "table_reviewer/llm:scripted",
      "table_retriever/table_index.top_k[description]", "sql_sampler/sql_sampler",
      "sql_writer/llm:scripted",         "sql_executor/sqlite.execute",      "sql_writer/llm:scripted",
      "sql_executor/sqlite.execute",     "sql_writer/llm:scripted",          "sql_executor/sqlite.execute"};
  EXPECT_EQ(tools, want);
  EXPECT_EQ(rig.steps[9].note, "attempt 1: schema_error");
  EXPECT_EQ(rig.steps[13].note, "attempt 3: rows");
}

TEST(Pipeline, AllFailUsesExactlyMaxAttempts) {
  for (int max_attempts : {1, 2, 3, 5}) {
    Rig rig(with_reviewers({th::rule(RoleTag::sql_writer, {}, "SQLQuery: SELECT missing_col FROM nowhere")}));
    StructuredConfig config;
    config.max_attempts = max_attempts;
    const auto run = rig.run(question("Anything?"), config);
    EXPECT_FALSE(run.evidence.has_value());
    EXPECT_EQ(static_cast<int>(run.attempts.size()), max_attempts);
    EXPECT_EQ(rig.gateway.call_count(RoleTag::sql_writer), max_attempts);
    for (const auto& a : run.attempts) EXPECT_EQ(a.outcome, AttemptOutcome::schema_error) << a.message;
  }
}

TEST(Pipeline, UnextractableRepliesAreFailedAttempts) {
  Rig rig(with_reviewers({th::rule(RoleTag::sql_writer, {"Attempt: 2\n"}, "SQLQuery: SELECT gender FROM patients WHERE subject_id = -1"),
                          th::rule(RoleTag::sql_writer, {"Attempt: 1\n"}, "SQLQuery: SELECT 1; SELECT 2"),
                          th::rule(RoleTag::sql_writer, {}, "I am not sure.")}));
  const auto run = rig.run(question("Gender?"));
  ASSERT_EQ(run.attempts.size(), 3u);
  EXPECT_EQ(run.attempts[0].outcome, AttemptOutcome::syntax_error);
  EXPECT_TRUE(run.attempts[0].sql.empty());
  EXPECT_EQ(run.attempts[1].outcome, AttemptOutcome::multi_statement);
  EXPECT_EQ(run.attempts[2].outcome, AttemptOutcome::empty_result);
  ASSERT_TRUE(run.evidence.has_value());
  EXPECT_TRUE(run.evidence->rows.empty());
  EXPECT_EQ(run.evidence->attempt_count, 3);
}

TEST(Pipeline, BackendErrorsPropagate) {
  Rig rig(th::reviewer_rules());
  try {
    rig.run(question("Anything?"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::script_exhausted);
  }
}

TEST(Pipeline, TableKLimitsContext) {
  Rig rig(with_reviewers({th::rule(RoleTag::sql_writer, {}, "SQLQuery: SELECT 1")}));
  StructuredConfig config;
  config.table_k = 2;
  const auto run = rig.run(question("Which medication doses and routes were ordered?"), config);
  ASSERT_EQ(run.selected_tables.size(), 2u);
  EXPECT_EQ(run.selected_tables[0], "prescriptions");
}
