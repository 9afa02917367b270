#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ehrnav/llm.hpp"
#include "ehrnav/model.hpp"
#include "ehrnav/prompts.hpp"
#include "ehrnav/trace.hpp"

namespace ehrnav::synthesis {

inline constexpr std::string_view kNone = "(none)";
inline constexpr std::string_view kInsufficientEvidence = "Insufficient evidence found to answer the question.";
inline constexpr std::size_t kSqlResponseMaxRows = 100;

struct EvidenceBundle {
  Question question;
  std::optional<StructuredEvidence> structured;
  std::optional<UnstructuredEvidence> unstructured;

  /// No structured evidence and no note chunks.
  bool empty() const;
};

llm::Bindings synthesis_bindings(const EvidenceBundle& bundle);

/// Deterministic: equal bundles give byte-identical prompts. Absent arms
/// render as "(none)"; chunks keep their timestamp prefixes.
std::string render_synthesis_prompt(const EvidenceBundle& bundle, const PromptLibrary& prompts);

/// Splits a reply into its SQL QUERY, Evidence from notes and Response
/// sections. Headers may carry a "N." prefix and any case. Throws
/// AnswerParseError when there is no Response section.
AnswerRecord parse_answer(const std::string& question_id, const std::string& raw);

AnswerRecord insufficient_evidence_answer(const std::string& question_id);

/// One answer_synthesizer call. An empty bundle is answered with the
/// insufficient-evidence record without calling the model; either way the
/// trace gains exactly one step.
AnswerRecord synthesize(const EvidenceBundle& bundle, llm::Gateway& gateway, const PromptLibrary& prompts,
                        RunContext& ctx);

/// One-sentence answer from note chunks alone. Throws Error(invalid_argument)
/// when `chunks` is empty.
std::string answer_notes_only(const Question& q, const std::vector<NoteChunk>& chunks, llm::Gateway& gateway,
                              const PromptLibrary& prompts, RunContext& ctx);

}  // namespace ehrnav::synthesis
