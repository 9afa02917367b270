#include "ehrnav/notes.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "ehrnav/error.hpp"
#include "ehrnav/serialize.hpp"

namespace ehrnav::notes {

void validate(const ChunkingConfig& config) {
  if (config.chunk_size_tokens == 0) throw Error(ErrorCode::config, "chunk size must be at least 1 token");
  if (config.overlap_tokens >= config.chunk_size_tokens) {
    throw Error(ErrorCode::config, "chunk overlap must be smaller than the chunk size");
  }
}

namespace {

bool ends_sentence(const std::vector<text::Word>& tokens, std::size_t i) {
  if (tokens[i].newlines_after >= 2) return true;
  const char last = tokens[i].text.back();
  return last == '.' || last == '?' || last == '!';
}

std::string normalize_header(std::string_view s) {
  std::string h = text::casefold(text::collapse_whitespace(s));
  while (!h.empty() && (h.back() == ':' || h.back() == ' ')) h.pop_back();
  return h;
}

}  // namespace

std::vector<TokenSpan> chunk_spans(const std::vector<text::Word>& tokens, const ChunkingConfig& config) {
  validate(config);
  const std::size_t n = tokens.size();
  const std::size_t size = config.chunk_size_tokens;
  const std::size_t overlap = config.overlap_tokens;
  std::vector<TokenSpan> spans;
  std::size_t start = 0;
  while (start < n) {
    std::size_t end = std::min(start + size, n);
    if (config.sentence_aware && end < n) {
      for (std::size_t e = end; e > start + overlap; --e) {
        if (ends_sentence(tokens, e - 1)) {
          end = e;
          break;
        }
      }
    }
    spans.push_back(TokenSpan{start, end});
    if (end == n) break;
    start = end - overlap;
  }
  return spans;
}

std::string timestamp_prefix(Instant t) { return "[" + format_clinical(t) + "] "; }

std::vector<NoteChunk> chunk_note(const NoteDocument& note, const ChunkingConfig& config) {
  const auto tokens = text::split_words(note.text);
  const std::string prefix = timestamp_prefix(note.timestamp);
  std::vector<NoteChunk> out;
  for (const auto& span : chunk_spans(tokens, config)) {
    std::string body;
    for (std::size_t i = span.start; i < span.end; ++i) {
      if (i > span.start) body += ' ';
      body += tokens[i].text;
    }
    out.push_back(NoteChunk{note.id, out.size(), span, note.timestamp, prefix + body, {}});
  }
  return out;
}

std::vector<NoteChunk> chunk_notes(const std::vector<NoteDocument>& notes, const ChunkingConfig& config) {
  std::vector<NoteChunk> out;
  for (const auto& note : notes) {
    auto chunks = chunk_note(note, config);
    std::move(chunks.begin(), chunks.end(), std::back_inserter(out));
  }
  return out;
}

std::string_view chunk_body(const NoteChunk& chunk) {
  std::string_view t = chunk.text;
  if (t.starts_with('[')) {
    const auto close = t.find("] ");
    if (close != std::string_view::npos) return t.substr(close + 2);
  }
  return t;
}

std::string chunk_key(const NoteChunk& chunk) { return chunk.note_id + "#" + std::to_string(chunk.index); }

NoteCorpus::NoteCorpus(std::vector<NoteDocument> notes) : notes_(std::move(notes)) {
  std::set<std::string> ids;
  for (const auto& n : notes_) {
    if (!ids.insert(n.id).second) throw Error(ErrorCode::dataset_format, "duplicate note id " + n.id);
  }
}

NoteCorpus NoteCorpus::load(const std::filesystem::path& path) {
  std::vector<NoteDocument> notes;
  std::size_t line = 0;
  for (const auto& j : read_jsonl(path)) {
    ++line;
    try {
      notes.push_back(j.get<NoteDocument>());
    } catch (const std::exception& e) {
      throw Error(ErrorCode::dataset_format,
                  path.string() + ": note record " + std::to_string(line) + ": " + e.what());
    }
  }
  return NoteCorpus(std::move(notes));
}

std::vector<NoteDocument> NoteCorpus::for_patient(const std::string& patient) const {
  std::vector<NoteDocument> out;
  for (const auto& n : notes_) {
    if (n.patient_scope == patient) out.push_back(n);
  }
  return out;
}

bool NoteCorpus::has_patient(const std::string& patient) const {
  return std::any_of(notes_.begin(), notes_.end(), [&](const auto& n) { return n.patient_scope == patient; });
}

std::string corpus_fingerprint(const std::vector<NoteDocument>& notes, const ChunkingConfig& config) {
  std::vector<const NoteDocument*> sorted;
  for (const auto& n : notes) sorted.push_back(&n);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  std::string canon = std::to_string(config.chunk_size_tokens) + "/" + std::to_string(config.overlap_tokens) + "/" +
                      (config.sentence_aware ? "s" : "w");
  for (const auto* n : sorted) {
    canon += '\x1e';
    canon += n->id + '\x1f' + n->patient_scope + '\x1f' + format_iso(n->timestamp) + '\x1f' + n->text;
  }
  return text::sha256_hex(canon);
}

std::vector<Section> find_sections(const std::vector<text::Word>& tokens) {
  std::vector<Section> out;
  const std::size_t n = tokens.size();
  for (std::size_t i = 0; i < n; ++i) {
    const bool line_start = i == 0 || tokens[i - 1].newlines_after > 0;
    if (!line_start) continue;
    for (std::size_t j = i; j < n && j < i + 5; ++j) {
      if (tokens[j].text.back() == ':') {
        std::string header;
        for (std::size_t t = i; t <= j; ++t) header += (t > i ? " " : "") + tokens[t].text;
        if (!out.empty()) out.back().span.end = i;
        out.push_back(Section{normalize_header(header), TokenSpan{i, n}});
        break;
      }
      if (tokens[j].newlines_after > 0) break;
    }
  }
  return out;
}

const NoteChunk* NoteIndex::find(std::string_view key) const {
  for (const auto& c : chunks) {
    if (chunk_key(c) == key) return &c;
  }
  return nullptr;
}

std::shared_ptr<std::mutex> NoteIndexStore::patient_lock(const std::string& patient) {
  std::lock_guard lock(mu_);
  auto& slot = locks_[patient];
  if (!slot) slot = std::make_shared<std::mutex>();
  return slot;
}

std::int64_t NoteIndexStore::rebuilds() const {
  std::lock_guard lock(mu_);
  return rebuilds_;
}

namespace {

std::filesystem::path stem_for(const std::filesystem::path& dir, const std::string& patient) {
  return dir / ("notes-" + text::digest(patient));
}

}  // namespace

std::shared_ptr<const NoteIndex> NoteIndexStore::load_persisted(const std::string& patient,
                                                                const std::string& fingerprint,
                                                                const std::string& backend_id) const {
  if (!dir_) return nullptr;
  const auto stem = stem_for(*dir_, patient);
  auto vectors = embed::VectorIndex::load(stem.string() + ".index.json", backend_id, fingerprint);
  if (!vectors) return nullptr;
  try {
    auto index = std::make_shared<NoteIndex>();
    index->patient_scope = patient;
    index->corpus_fingerprint = fingerprint;
    index->backend_id = backend_id;
    index->built_at = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
    for (const auto& j : read_jsonl(stem.string() + ".chunks.jsonl")) {
      NoteChunk c = j.get<NoteChunk>();
      c.embedding = vectors->vector_of(chunk_key(c));
      index->chunks.push_back(std::move(c));
    }
    if (index->chunks.size() != vectors->size()) return nullptr;
    index->index = std::move(*vectors);
    return index;
  } catch (const std::exception&) {
    return nullptr;
  }
}

void NoteIndexStore::persist(const NoteIndex& index) const {
  if (!dir_) return;
  std::filesystem::create_directories(*dir_);
  const auto stem = stem_for(*dir_, index.patient_scope);
  std::string lines;
  for (NoteChunk c : index.chunks) {
    c.embedding.clear();
    lines += to_line(c) + "\n";
  }
  write_file(stem.string() + ".chunks.jsonl", lines);
  index.index.save(stem.string() + ".index.json", index.backend_id, index.corpus_fingerprint);
}

std::shared_ptr<const NoteIndex> NoteIndexStore::build_index(const std::string& patient,
                                                             const std::vector<NoteDocument>& notes,
                                                             const ChunkingConfig& config, embed::Embedder& embedder) {
  validate(config);
  const std::string fingerprint = corpus_fingerprint(notes, config);
  const std::string backend_id = embedder.backend_id();

  auto lock = patient_lock(patient);
  std::lock_guard build_lock(*lock);
  {
    std::lock_guard guard(mu_);
    auto it = indexes_.find(patient);
    if (it != indexes_.end() && it->second->corpus_fingerprint == fingerprint && it->second->backend_id == backend_id) {
      return it->second;
    }
  }

  std::map<std::string, std::vector<Section>> sections;
  for (const auto& n : notes) sections[n.id] = find_sections(text::split_words(n.text));

  std::shared_ptr<const NoteIndex> built = load_persisted(patient, fingerprint, backend_id);
  if (built) {
    auto copy = std::make_shared<NoteIndex>(*built);
    copy->sections = std::move(sections);
    built = copy;
  } else {
    auto index = std::make_shared<NoteIndex>();
    index->patient_scope = patient;
    index->corpus_fingerprint = fingerprint;
    index->backend_id = backend_id;
    index->built_at = std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
    index->sections = std::move(sections);
    index->chunks = chunk_notes(notes, config);
    index->index = embed::VectorIndex(embedder.dimension());
    std::vector<std::string> texts;
    for (const auto& c : index->chunks) texts.push_back(c.text);
    auto vectors = embedder.embed_all(texts);
    for (std::size_t i = 0; i < index->chunks.size(); ++i) {
      index->chunks[i].embedding = vectors[i];
      index->index.add(chunk_key(index->chunks[i]), std::move(vectors[i]), text::digest(index->chunks[i].text));
    }
    persist(*index);
    std::lock_guard guard(mu_);
    ++rebuilds_;
    built = index;
  }
  std::lock_guard guard(mu_);
  indexes_[patient] = built;
  return built;
}

std::string serialize_structured_for_query(const StructuredEvidence& e, std::size_t max_rows) {
  if (e.rows.empty()) return "(no rows)";
  std::vector<std::string> lines;
  const std::size_t shown = std::min(max_rows, e.rows.size());
  for (std::size_t r = 0; r < shown; ++r) {
    std::vector<std::string> cells;
    for (std::size_t c = 0; c < e.rows[r].size(); ++c) {
      const std::string name = c < e.columns.size() ? e.columns[c] : "col" + std::to_string(c + 1);
      cells.push_back(name + "=" + value_to_string(e.rows[r][c]));
    }
    lines.push_back(text::join(cells, "; "));
  }
  if (shown < e.rows.size()) lines.push_back("(+" + std::to_string(e.rows.size() - shown) + " more rows)");
  return text::join(lines, "\n");
}

std::string fused_query_text(const Question& q, const std::optional<StructuredEvidence>& structured) {
  if (!structured) return q.text;
  return q.text + std::string(kEvidenceSeparator) + serialize_structured_for_query(*structured);
}

UnstructuredEvidence retrieve_chunks(const Question& q, const std::optional<StructuredEvidence>& structured,
                                     const NoteIndex& index, std::size_t k, embed::Embedder& embedder) {
  if (k < 1) throw Error(ErrorCode::invalid_argument, "note retrieval k must be at least 1");
  UnstructuredEvidence out;
  out.fallback_mode = !structured.has_value();
  if (index.chunks.empty()) return out;

  const embed::Vector query = embedder.embed(fused_query_text(q, structured));
  std::vector<embed::Scored> ranked;
  const bool time_filter = out.fallback_mode && (q.window_from || q.window_to);
  std::vector<std::string> hints;
  if (out.fallback_mode) {
    for (const auto& h : q.section_hints) {
      if (auto n = normalize_header(h); !n.empty()) hints.push_back(n);
    }
  }
  if (time_filter || !hints.empty()) {
    std::set<std::string> keep;
    for (const auto& c : index.chunks) {
      if (q.window_from && c.timestamp < *q.window_from) continue;
      if (q.window_to && c.timestamp > *q.window_to) continue;
      if (!hints.empty()) {
        auto it = index.sections.find(c.note_id);
        if (it == index.sections.end()) continue;
        const bool in_section = std::any_of(it->second.begin(), it->second.end(), [&](const Section& s) {
          return std::find(hints.begin(), hints.end(), s.header) != hints.end() && s.span.start < c.token_span.end &&
                 c.token_span.start < s.span.end;
        });
        if (!in_section) continue;
      }
      keep.insert(chunk_key(c));
    }
    ranked = index.index.top_k_filtered(query, k, [&](const std::string& key) { return keep.contains(key); });
  } else {
    ranked = index.index.top_k(query, k);
  }
  for (const auto& s : ranked) out.chunks.push_back(ScoredChunk{*index.find(s.key), s.score});
  out.k_used = static_cast<int>(out.chunks.size());
  return out;
}

}  // namespace ehrnav::notes
