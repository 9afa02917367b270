#include <gtest/gtest.h>

#include <thread>

#include "ehrnav/error.hpp"
#include "ehrnav/llm.hpp"
#include "ehrnav/prompts.hpp"
#include "ehrnav/serialize.hpp"
#include "support.hpp"

using namespace ehrnav;
namespace th = ehrnav::testing;
using llm::RoleTag;

TEST(PromptTemplate, FindsIdentifierPlaceholdersOnly) {
  llm::PromptTemplate t("t", "Q: {query_str} {x1}\n{ \"SQL\": 1 } {} {9a} {a-b}");
  EXPECT_EQ(t.required_placeholders(), (std::set<std::string>{"query_str", "x1"}));
}

TEST(PromptTemplate, RenderIsSinglePassAndVerbatim) {
  llm::PromptTemplate t("t", "[{a}] [{b}]");
  // A bound value that looks like a placeholder is not expanded again.
  EXPECT_EQ(llm::render(t, {{"a", "{b}"}, {"b", "x\n  y"}}), "[{b}] [x\n  y]");
}

TEST(PromptTemplate, MissingPlaceholdersAreAllNamed) {
  llm::PromptTemplate t("t", "{a} {b} {c}");
  try {
    llm::render(t, {{"b", "1"}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_placeholder);
    EXPECT_NE(std::string(e.what()).find("a, c"), std::string::npos) << e.what();
  }
}

TEST(PromptLibrary, ShipsAllTemplatesWithExpectedPlaceholders) {
  PromptLibrary lib;
  using S = std::set<std::string>;
  EXPECT_EQ(lib.get("table_description").required_placeholders(),
            (S{"columns", "foreign_keys", "primary_keys", "table_name"}));
  EXPECT_EQ(lib.get("ehrsql_sql").required_placeholders(), (S{"query_str", "schema"}));
  EXPECT_EQ(lib.get("drugehrqa_sql").required_placeholders(), (S{"dialect", "query_str", "schema"}));
  EXPECT_EQ(lib.get("omop_sql").required_placeholders(), (S{"dialect", "query_str", "schema"}));
  EXPECT_EQ(lib.get("answer_synthesis").required_placeholders(), (S{"context_str", "notes", "query_str", "sql_query"}));
  EXPECT_EQ(lib.get("note_qa").required_placeholders(), (S{"context", "query"}));
  EXPECT_THROW(lib.get("nope"), Error);
}

TEST(PromptLibrary, EmbeddedTextMatchesSourceFiles) {
  PromptLibrary lib;
  for (const char* name : {"table_description", "ehrsql_sql", "drugehrqa_sql", "omop_sql", "answer_synthesis", "note_qa"}) {
    EXPECT_EQ(lib.get(name).text(), read_file(th::source_dir() / "prompts" / (std::string(name) + ".txt"))) << name;
  }
}

TEST(PromptLibrary, OverrideDirectoryReplacesNamedTemplates) {
  th::TempDir dir;
  write_file(dir / "note_qa.txt", "C={context} Q={query}");
  PromptLibrary lib(dir.path());
  EXPECT_EQ(llm::render(lib.get("note_qa"), {{"context", "c"}, {"query", "q"}}), "C=c Q=q");
  EXPECT_EQ(lib.get("omop_sql").text(), PromptLibrary().get("omop_sql").text());
}

TEST(Profiles, KnownProfilesSelectTemplates) {
  EXPECT_EQ(builtin_profile("ehrsql").sql_template, "ehrsql_sql");
  EXPECT_EQ(builtin_profile("drugehrqa").sql_template, "drugehrqa_sql");
  EXPECT_EQ(builtin_profile("omop").reply_format, SqlReplyFormat::json_object);
  EXPECT_EQ(builtin_profile("fixture").table_k, 10u);
  EXPECT_EQ(builtin_profile("fixture").note_k, 10u);
  EXPECT_THROW(builtin_profile("mimic5"), Error);
  EXPECT_TRUE(is_known_profile("ehrnoteqa"));
}

TEST(ScriptedBackend, FirstMatchingRuleWithUsesLeftAnswers) {
  auto once = th::rule(RoleTag::sql_writer, {"alpha", "beta"}, "first", 10);
  once.times = 1;
  llm::ScriptedBackend b({once, th::rule(RoleTag::sql_writer, {"alpha"}, "second", 20),
                          th::rule(RoleTag::note_qa, {}, "any note")});
  VirtualClock clock;
  llm::ChatRequest req;
  req.role_tag = RoleTag::sql_writer;
  req.rendered_prompt = "alpha beta";
  EXPECT_EQ(b.complete(req, clock).text, "first");
  EXPECT_DOUBLE_EQ(clock.now_ms(), 10.0);
  EXPECT_EQ(b.complete(req, clock).text, "second");
  EXPECT_DOUBLE_EQ(clock.now_ms(), 30.0);
  req.rendered_prompt = "gamma";
  EXPECT_THROW(
      {
        try {
          b.complete(req, clock);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), ErrorCode::script_exhausted);
          throw;
        }
      },
      Error);
  req.role_tag = RoleTag::note_qa;
  EXPECT_EQ(b.complete(req, clock).text, "any note");
}

TEST(ScriptedBackend, LoadsArrayAndLineFiles) {
  th::TempDir dir;
  write_file(dir / "a.json",
             R"([{"role_tag":"sql_writer","match":["x","y"],"reply":"r","latency_ms":5,"tokens":{"prompt":3,"completion":2},"cost":0.5,"times":2}])");
  write_file(dir / "b.jsonl", "{\"role_tag\":\"table_reviewer\",\"match\":\"t\",\"reply\":\"d\"}\n");
  const auto a = llm::ScriptedBackend::load_rules(dir / "a.json");
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].patterns, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(a[0].prompt_tokens, 3);
  EXPECT_EQ(*a[0].cost, 0.5);
  EXPECT_EQ(*a[0].times, 2);
  const auto b = llm::ScriptedBackend::load_rules(dir / "b.jsonl");
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].role_tag, RoleTag::table_reviewer);
  write_file(dir / "c.json", R"([{"role_tag":"nobody","reply":"r"}])");
  EXPECT_THROW(llm::ScriptedBackend::load_rules(dir / "c.json"), Error);
}

TEST(ScriptedBackend, CostFromTokensWhenNotScripted) {
  auto r = th::rule(RoleTag::sql_writer, {}, "x");
  r.prompt_tokens = 1500;
  r.completion_tokens = 500;
  llm::ScriptedBackend b({r}, 0.01);
  VirtualClock clock;
  llm::ChatRequest req;
  EXPECT_DOUBLE_EQ(b.complete(req, clock).cost, 0.02);
}

TEST(Gateway, CountsCallsAndRecordsOneStepEach) {
  auto r = th::rule(RoleTag::sql_writer, {}, "ok", 40);
  r.prompt_tokens = 7;
  r.completion_tokens = 3;
  r.cost = 0.125;
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{r}));
  th::Ctx c;
  llm::ChatRequest req;
  req.role_tag = RoleTag::sql_writer;
  req.rendered_prompt = "p";
  g.complete(req, c.ctx);
  g.complete(req, c.ctx);
  req.role_tag = RoleTag::note_qa;
  EXPECT_THROW(g.complete(req, c.ctx), Error);

  EXPECT_EQ(g.call_count(RoleTag::sql_writer), 2);
  EXPECT_EQ(g.call_count(RoleTag::note_qa), 1);
  EXPECT_EQ(g.call_count(RoleTag::table_reviewer), 0);
  const auto steps = c.trace.steps();
  ASSERT_EQ(steps.size(), 3u);
  EXPECT_EQ(steps[0].agent, "sql_writer");
  EXPECT_EQ(steps[0].tool, "llm:scripted");
  EXPECT_DOUBLE_EQ(steps[0].wall_ms, 40.0);
  EXPECT_EQ(steps[0].prompt_tokens, 7);
  EXPECT_EQ(steps[0].cost, 0.125);
  EXPECT_EQ(steps[0].input_digest, text::digest("p"));
  EXPECT_EQ(steps[0].output_digest, text::digest("ok"));
  EXPECT_EQ(steps[2].note, "error:script_exhausted");
  g.reset_counts();
  EXPECT_EQ(g.call_count(RoleTag::sql_writer), 0);
}

TEST(Gateway, TemperatureIsPinnedToZero) {
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{
      th::rule(RoleTag::sql_writer, {}, "ok")}));
  th::Ctx c;
  llm::ChatRequest req;
  req.temperature = 0.7;
  EXPECT_THROW(g.complete(req, c.ctx), Error);
  EXPECT_EQ(g.call_count(RoleTag::sql_writer), 0);

  llm::GatewayOptions experimental;
  experimental.experimental_temperature = true;
  llm::Gateway x(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{
                     th::rule(RoleTag::sql_writer, {}, "ok")}),
                 experimental);
  EXPECT_EQ(x.complete(req, c.ctx).text, "ok");
}

namespace {

class FlakyBackend final : public llm::ChatBackend {
 public:
  explicit FlakyBackend(int failures) : failures_(failures) {}
  std::string id() const override { return "flaky"; }
  llm::ChatResponse complete(const llm::ChatRequest&, Clock&) override {
    ++calls;
    if (failures_-- > 0) throw Error(ErrorCode::backend_transport, "connection reset");
    return llm::ChatResponse{"ok", 1, 1, 0, 0};
  }
  int calls = 0;

 private:
  int failures_;
};

}  // namespace

TEST(Gateway, TransportRetriesAreOptIn) {
  auto flaky = std::make_shared<FlakyBackend>(1);
  llm::Gateway none(flaky);
  th::Ctx c;
  EXPECT_THROW(none.complete(llm::ChatRequest{}, c.ctx), Error);

  auto flaky2 = std::make_shared<FlakyBackend>(1);
  llm::GatewayOptions opts;
  opts.transport_retries = 1;
  llm::Gateway retrying(flaky2, opts);
  EXPECT_EQ(retrying.complete(llm::ChatRequest{}, c.ctx).text, "ok");
  EXPECT_EQ(flaky2->calls, 2);
}

TEST(Gateway, ConcurrentCallsAreCountedExactly) {
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{
      th::rule(RoleTag::answer_synthesizer, {}, "ok", 1)}));
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&] {
      th::Ctx c;
      llm::ChatRequest req;
      req.role_tag = RoleTag::answer_synthesizer;
      for (int i = 0; i < 50; ++i) g.complete(req, c.ctx);
      EXPECT_EQ(c.trace.steps().size(), 50u);
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(g.call_count(RoleTag::answer_synthesizer), 400);
}
