#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ehrnav/embedding.hpp"
#include "ehrnav/model.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav::notes {

struct ChunkingConfig {
  std::size_t chunk_size_tokens = 256;
  std::size_t overlap_tokens = 32;
  bool sentence_aware = true;
  bool operator==(const ChunkingConfig&) const = default;
};

/// Throws Error(config) unless 0 <= overlap < size.
void validate(const ChunkingConfig& config);

/// Window spans over a token stream. Windows advance so that consecutive
/// spans share exactly `overlap` tokens; the last window ends at the stream
/// end. With sentence_aware set, a window end moves back to the latest
/// sentence end that still leaves more than `overlap` tokens in the window.
std::vector<TokenSpan> chunk_spans(const std::vector<text::Word>& tokens, const ChunkingConfig& config);

/// "[YYYY-MM-DD HH:MM:SS] "
std::string timestamp_prefix(Instant t);

std::vector<NoteChunk> chunk_note(const NoteDocument& note, const ChunkingConfig& config);
std::vector<NoteChunk> chunk_notes(const std::vector<NoteDocument>& notes, const ChunkingConfig& config);

/// Chunk text without its timestamp prefix.
std::string_view chunk_body(const NoteChunk& chunk);

/// "note_id#index"
std::string chunk_key(const NoteChunk& chunk);

/// All notes, loaded from JSON lines {id, patient, timestamp, text}.
class NoteCorpus {
 public:
  NoteCorpus() = default;
  explicit NoteCorpus(std::vector<NoteDocument> notes);
  static NoteCorpus load(const std::filesystem::path& path);

  const std::vector<NoteDocument>& notes() const { return notes_; }
  std::vector<NoteDocument> for_patient(const std::string& patient) const;
  bool has_patient(const std::string& patient) const;

 private:
  std::vector<NoteDocument> notes_;
};

/// Changes iff any note id, timestamp or text changes, or the chunking
/// configuration does. Independent of input order.
std::string corpus_fingerprint(const std::vector<NoteDocument>& notes, const ChunkingConfig& config);

/// A header line ("Discharge Medications:") and the tokens up to the next one.
struct Section {
  std::string header;  // casefolded, trailing colon removed
  TokenSpan span;
};

/// Lines of at most five tokens whose last token ends with ':' start a section.
std::vector<Section> find_sections(const std::vector<text::Word>& tokens);

struct NoteIndex {
  std::string patient_scope;
  std::vector<NoteChunk> chunks;
  embed::VectorIndex index;
  Instant built_at;
  std::string corpus_fingerprint;
  std::string backend_id;
  std::map<std::string, std::vector<Section>> sections;  // by note id

  const NoteChunk* find(std::string_view key) const;
};

/// Built indexes per patient. Builds for one patient are single-flight;
/// built indexes are immutable and shared. With a directory, indexes are
/// also persisted there and reused across processes.
class NoteIndexStore {
 public:
  NoteIndexStore() = default;
  explicit NoteIndexStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::shared_ptr<const NoteIndex> build_index(const std::string& patient, const std::vector<NoteDocument>& notes,
                                               const ChunkingConfig& config, embed::Embedder& embedder);

  /// Number of builds that had to chunk and embed.
  std::int64_t rebuilds() const;

 private:
  std::shared_ptr<std::mutex> patient_lock(const std::string& patient);
  std::shared_ptr<const NoteIndex> load_persisted(const std::string& patient, const std::string& fingerprint,
                                                  const std::string& backend_id) const;
  void persist(const NoteIndex& index) const;

  std::optional<std::filesystem::path> dir_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  std::map<std::string, std::shared_ptr<const NoteIndex>> indexes_;
  std::int64_t rebuilds_ = 0;
};

inline constexpr std::size_t kDefaultMaxRows = 20;
inline constexpr std::string_view kEvidenceSeparator = "\n[structured evidence]\n";

/// Rows as "col=value; col=value" lines; "(no rows)" when empty and a
/// "(+N more rows)" line past max_rows.
std::string serialize_structured_for_query(const StructuredEvidence& e, std::size_t max_rows = kDefaultMaxRows);

/// Question text, followed by the separator and serialized evidence when present.
std::string fused_query_text(const Question& q, const std::optional<StructuredEvidence>& structured);

/// Top-k chunks by cosine to the fused query. Without structured evidence the
/// result is in fallback mode and the question's time window and section
/// hints restrict the candidates.
UnstructuredEvidence retrieve_chunks(const Question& q, const std::optional<StructuredEvidence>& structured,
                                     const NoteIndex& index, std::size_t k, embed::Embedder& embedder);

}  // namespace ehrnav::notes
