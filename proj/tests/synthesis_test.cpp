#include <gtest/gtest.h>

#include "ehrnav/error.hpp"
#include "ehrnav/synthesis.hpp"
#include "ehrnav/time.hpp"
#include "support.hpp"

using namespace ehrnav;
using namespace ehrnav::synthesis;
using llm::RoleTag;
namespace th = ehrnav::testing;

namespace {

EvidenceBundle full_bundle() {
  EvidenceBundle b;
  b.question.id = "m01";
  b.question.text = "Why was aspirin 81 mg started for patient 10006?";
  b.structured = StructuredEvidence{"SELECT drug, dose_val_rx FROM prescriptions WHERE subject_id = :patient_id",
                                    {"drug", "dose_val_rx"},
                                    {{Value{std::string("Aspirin")}, Value{std::string("325")}},
                                     {Value{std::string("Aspirin")}, Value{std::string("81")}}},
                                    1};
  UnstructuredEvidence u;
  NoteChunk c{"n-1", 0, {0, 6}, parse_instant("2165-02-06 11:00:00"), "[2165-02-06 11:00:00] Aspirin reduced to 81 mg.", {}};
  NoteChunk d{"n-2", 1, {4, 9}, parse_instant("2164-11-01 16:00:00"), "[2164-11-01 16:00:00] NSTEMI, aspirin 325 mg.", {}};
  u.chunks = {{c, 0.71}, {d, 0.42}};
  u.k_used = 2;
  b.unstructured = u;
  return b;
}

}  // namespace

TEST(SynthesisPrompt, MatchesGolden) {
  PromptLibrary prompts;
  const auto prompt = render_synthesis_prompt(full_bundle(), prompts);
  EXPECT_EQ(th::check_golden("synthesis_prompt.txt", prompt), "");
  EXPECT_EQ(prompt, render_synthesis_prompt(full_bundle(), prompts));
}

TEST(SynthesisPrompt, AbsentArmsRenderAsNone) {
  EvidenceBundle b = full_bundle();
  b.structured.reset();
  auto bindings = synthesis_bindings(b);
  EXPECT_EQ(bindings.at("sql_query"), "(none)");
  EXPECT_EQ(bindings.at("context_str"), "(none)");
  EXPECT_EQ(bindings.at("notes"),
            "[2165-02-06 11:00:00] Aspirin reduced to 81 mg.\n\n[2164-11-01 16:00:00] NSTEMI, aspirin 325 mg.");

  b = full_bundle();
  b.unstructured->chunks.clear();
  bindings = synthesis_bindings(b);
  EXPECT_EQ(bindings.at("notes"), "(none)");
  EXPECT_EQ(bindings.at("context_str"), "drug=Aspirin; dose_val_rx=325\ndrug=Aspirin; dose_val_rx=81");
}

TEST(SynthesisPrompt, SqlResponseCappedAtHundredRows) {
  EvidenceBundle b = full_bundle();
  b.structured->columns = {"n"};
  b.structured->rows.clear();
  for (int i = 0; i < 130; ++i) b.structured->rows.push_back({Value{std::int64_t{i}}});
  const auto ctx = synthesis_bindings(b).at("context_str");
  EXPECT_TRUE(ctx.ends_with("n=99\n(+30 more rows)")) << ctx.substr(ctx.size() - 40);
}

TEST(ParseAnswer, ThreeSections) {
  const std::string raw =
      "1. SQL QUERY: SELECT 1\n"
      "2. Evidence from notes: Aspirin reduced to 81 mg.\nSecond line.\n"
      "3. Response: Aspirin was reduced to 81 mg daily.\n";
  const auto a = parse_answer("q", raw);
  EXPECT_EQ(a.question_id, "q");
  EXPECT_EQ(a.sql_section, "SELECT 1");
  EXPECT_EQ(a.notes_evidence_section, "Aspirin reduced to 81 mg.\nSecond line.");
  EXPECT_EQ(a.response_section, "Aspirin was reduced to 81 mg daily.");
  EXPECT_EQ(a.raw_model_output, raw);
}

TEST(ParseAnswer, HeaderVariants) {
  EXPECT_EQ(parse_answer("q", "**Response:** yes").response_section, "yes");
  EXPECT_EQ(parse_answer("q", "## 3) response: yes").response_section, "yes");
  EXPECT_EQ(parse_answer("q", "- RESPONSE:\n  multi\n  line ").response_section, "multi\n  line");
  const auto a = parse_answer("q", "sql query: (none)\nResponse: no");
  EXPECT_EQ(a.sql_section, "(none)");
  EXPECT_EQ(a.response_section, "no");
}

TEST(ParseAnswer, MissingEvidenceSectionIsEmpty) {
  const auto a = parse_answer("q", "1. SQL QUERY: SELECT 1\n3. Response: 81 mg");
  EXPECT_EQ(a.notes_evidence_section, "");
  EXPECT_EQ(a.response_section, "81 mg");
}

TEST(ParseAnswer, FreeTextIsAParseError) {
  const std::string raw = "The patient takes aspirin.";
  try {
    parse_answer("q", raw);
    FAIL();
  } catch (const AnswerParseError& e) {
    EXPECT_EQ(e.code(), ErrorCode::answer_parse);
    EXPECT_EQ(e.raw_output(), raw);
  }
  EXPECT_THROW(parse_answer("q", "Responses are: nothing"), AnswerParseError);
}

TEST(Synthesize, OneCallOneStep) {
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{
      th::rule(RoleTag::answer_synthesizer, {"- Query: Why was aspirin 81 mg started"}, "3. Response: dose reduction", 1600)}));
  th::Ctx c;
  const auto a = synthesize(full_bundle(), g, PromptLibrary(), c.ctx);
  EXPECT_EQ(a.response_section, "dose reduction");
  EXPECT_EQ(g.call_count(RoleTag::answer_synthesizer), 1);
  ASSERT_EQ(c.trace.steps().size(), 1u);
  EXPECT_DOUBLE_EQ(c.trace.steps()[0].wall_ms, 1600.0);
}

TEST(Synthesize, EmptyBundleSkipsTheModel) {
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{}));
  th::Ctx c;
  EvidenceBundle b;
  b.question.id = "q9";
  b.question.text = "Anything?";
  b.unstructured = UnstructuredEvidence{};
  ASSERT_TRUE(b.empty());
  const auto a = synthesize(b, g, PromptLibrary(), c.ctx);
  EXPECT_EQ(a.response_section, "Insufficient evidence found to answer the question.");
  EXPECT_EQ(a.question_id, "q9");
  EXPECT_EQ(g.call_count(RoleTag::answer_synthesizer), 0);
  ASSERT_EQ(c.trace.steps().size(), 1u);
  EXPECT_EQ(c.trace.steps()[0].tool, "insufficient_evidence");

  b.structured = StructuredEvidence{"SELECT 1", {"x"}, {}, 1};
  EXPECT_FALSE(b.empty());
}

TEST(NotesOnly, RendersNoteQaPrompt) {
  auto r = th::rule(RoleTag::note_qa,
                    {"CONTEXT: [2165-02-06 11:00:00] Aspirin reduced to 81 mg.\n\n[2164-11-01 16:00:00] NSTEMI",
                     "Question: Which dose?\nOUTPUT:"},
                    "(B) 81 mg");
  llm::Gateway g(std::make_shared<llm::ScriptedBackend>(std::vector<llm::ScriptRule>{r}));
  th::Ctx c;
  std::vector<NoteChunk> chunks;
  const auto bundle = full_bundle();
  for (const auto& s : bundle.unstructured->chunks) chunks.push_back(s.chunk);
  Question q;
  q.text = "Which dose?";
  EXPECT_EQ(answer_notes_only(q, chunks, g, PromptLibrary(), c.ctx), "(B) 81 mg");
  EXPECT_THROW(answer_notes_only(q, {}, g, PromptLibrary(), c.ctx), Error);
}
