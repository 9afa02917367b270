#include "ehrnav/synthesis.hpp"

#include <array>
#include <cctype>

#include "ehrnav/error.hpp"
#include "ehrnav/notes.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::synthesis {

bool EvidenceBundle::empty() const { return !structured && (!unstructured || unstructured->chunks.empty()); }

llm::Bindings synthesis_bindings(const EvidenceBundle& bundle) {
  std::string notes_text(kNone);
  if (bundle.unstructured && !bundle.unstructured->chunks.empty()) {
    std::vector<std::string> parts;
    for (const auto& c : bundle.unstructured->chunks) parts.push_back(c.chunk.text);
    notes_text = text::join(parts, "\n\n");
  }
  return llm::Bindings{
      {"query_str", bundle.question.text},
      {"sql_query", bundle.structured ? bundle.structured->sql : std::string(kNone)},
      {"context_str", bundle.structured ? notes::serialize_structured_for_query(*bundle.structured, kSqlResponseMaxRows)
                                        : std::string(kNone)},
      {"notes", notes_text},
  };
}

std::string render_synthesis_prompt(const EvidenceBundle& bundle, const PromptLibrary& prompts) {
  return llm::render(prompts.get("answer_synthesis"), synthesis_bindings(bundle));
}

namespace {

enum Section { kSql = 0, kNotes = 1, kResponse = 2 };

constexpr std::array<std::string_view, 3> kHeaders{"sql query", "evidence from notes", "response"};

// Returns the section and the offset of the text after the header's colon.
std::optional<std::pair<Section, std::size_t>> header_of(std::string_view line) {
  std::size_t i = 0;
  auto skip = [&](auto pred) {
    while (i < line.size() && pred(static_cast<unsigned char>(line[i]))) ++i;
  };
  skip([](unsigned char c) { return std::isspace(c) || c == '*' || c == '#' || c == '-'; });
  const std::size_t digits = i;
  skip([](unsigned char c) { return std::isdigit(c); });
  if (i > digits) {
    if (i < line.size() && (line[i] == '.' || line[i] == ')')) ++i;
    else i = digits;
  }
  skip([](unsigned char c) { return std::isspace(c) || c == '*'; });
  const std::string_view rest = line.substr(i);
  for (std::size_t s = 0; s < kHeaders.size(); ++s) {
    if (!text::starts_with_icase(rest, kHeaders[s])) continue;
    std::size_t j = i + kHeaders[s].size();
    while (j < line.size() && line[j] == '*') ++j;
    if (j < line.size() && line[j] == ':') {
      ++j;
      while (j < line.size() && line[j] == '*') ++j;
      return std::make_pair(static_cast<Section>(s), j);
    }
  }
  return std::nullopt;
}

}  // namespace

AnswerRecord parse_answer(const std::string& question_id, const std::string& raw) {
  std::array<std::optional<std::string>, 3> sections;
  std::optional<Section> current;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    std::size_t nl = raw.find('\n', pos);
    if (nl == std::string::npos) nl = raw.size();
    const std::string_view line(raw.data() + pos, nl - pos);
    if (auto h = header_of(line)) {
      current = h->first;
      sections[h->first] = std::string(line.substr(h->second));
    } else if (current) {
      *sections[*current] += "\n";
      *sections[*current] += line;
    }
    pos = nl + 1;
  }
  if (!sections[kResponse]) throw AnswerParseError("model reply has no Response section", raw);
  AnswerRecord a;
  a.question_id = question_id;
  a.sql_section = sections[kSql] ? std::string(text::trim(*sections[kSql])) : "";
  a.notes_evidence_section = sections[kNotes] ? std::string(text::trim(*sections[kNotes])) : "";
  a.response_section = std::string(text::trim(*sections[kResponse]));
  a.raw_model_output = raw;
  return a;
}

AnswerRecord insufficient_evidence_answer(const std::string& question_id) {
  AnswerRecord a;
  a.question_id = question_id;
  a.response_section = std::string(kInsufficientEvidence);
  return a;
}

AnswerRecord synthesize(const EvidenceBundle& bundle, llm::Gateway& gateway, const PromptLibrary& prompts,
                        RunContext& ctx) {
  if (bundle.empty()) {
    ctx.trace.add(TraceStep{llm::to_string(llm::RoleTag::answer_synthesizer), "insufficient_evidence",
                            text::digest(bundle.question.text), text::digest(kInsufficientEvidence), 0.0, 0, 0, 0.0,
                            "no structured or note evidence"});
    return insufficient_evidence_answer(bundle.question.id);
  }
  llm::ChatRequest req;
  req.role_tag = llm::RoleTag::answer_synthesizer;
  req.rendered_prompt = render_synthesis_prompt(bundle, prompts);
  const auto reply = gateway.complete(req, ctx);
  return parse_answer(bundle.question.id, reply.text);
}

std::string answer_notes_only(const Question& q, const std::vector<NoteChunk>& chunks, llm::Gateway& gateway,
                              const PromptLibrary& prompts, RunContext& ctx) {
  if (chunks.empty()) throw Error(ErrorCode::invalid_argument, "answer_notes_only needs at least one note chunk");
  std::vector<std::string> parts;
  for (const auto& c : chunks) parts.push_back(c.text);
  llm::ChatRequest req;
  req.role_tag = llm::RoleTag::note_qa;
  req.rendered_prompt = llm::render(prompts.get("note_qa"), {{"context", text::join(parts, "\n\n")}, {"query", q.text}});
  return gateway.complete(req, ctx).text;
}

}  // namespace ehrnav::synthesis
