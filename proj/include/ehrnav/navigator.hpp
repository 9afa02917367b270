#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ehrnav/embedding.hpp"
#include "ehrnav/llm.hpp"
#include "ehrnav/notes.hpp"
#include "ehrnav/prompts.hpp"
#include "ehrnav/serialize.hpp"
#include "ehrnav/sql.hpp"
#include "ehrnav/structured.hpp"
#include "ehrnav/synthesis.hpp"
#include "ehrnav/trace.hpp"

namespace ehrnav {

enum class Modality { structured, unstructured, multimodal };

std::string to_string(Modality m);
Modality parse_modality(std::string_view s);

struct PipelineConfig {
  structured::StructuredConfig structured;
  notes::ChunkingConfig chunking;
  std::optional<std::size_t> table_k;  // unset: the profile's value
  std::optional<std::size_t> note_k;   // unset: the profile's value
  bool embed_table_names = false;
};

/// Throws Error(config) on out-of-range values.
void validate(const PipelineConfig& config);

struct DatabaseEntry {
  std::string id;
  sql::Database db;
  std::string profile;
  /// Optional read-only query with a :patient_id parameter; a returned row
  /// marks the patient as known to this database.
  std::string patient_id_query;
};

struct AskOptions {
  std::string db_id;
  std::optional<std::string> profile;  // overrides the database's profile
  Modality modality = Modality::multimodal;
  bool synthesize = true;  // false: stop after evidence gathering
};

struct AskResult {
  AnswerRecord answer;
  synthesis::EvidenceBundle bundle;
  std::optional<structured::StructuredRun> structured_run;
  bool insufficient_evidence = false;
};

/// The question-answering pipeline: structured arm, note retrieval
/// conditioned on its evidence, then synthesis.
class Navigator {
 public:
  struct Components {
    std::shared_ptr<llm::Gateway> gateway;
    std::shared_ptr<embed::Embedder> embedder;
    std::shared_ptr<const PromptLibrary> prompts;
    std::shared_ptr<const notes::NoteCorpus> corpus;
    std::shared_ptr<structured::DescriptionCache> descriptions;
    std::shared_ptr<notes::NoteIndexStore> note_indexes;
  };

  Navigator(Components components, PipelineConfig config);

  void add_database(DatabaseEntry entry);
  const DatabaseEntry& database(const std::string& id) const;
  bool has_database(const std::string& id) const;
  std::vector<std::string> database_ids() const;

  /// Throws Error(unknown_scope) for an unknown database, profile or patient
  /// and Error(invalid_argument) for a blank question.
  void check_request(const Question& q, const AskOptions& options) const;

  /// Known if the notes corpus has the patient, or the database's
  /// patient_id_query returns a row.
  bool knows_patient(const std::string& db_id, const std::string& patient) const;

  /// Gateway and backend errors propagate; whatever ran is already in the trace.
  AskResult ask(const Question& q, const AskOptions& options, RunContext& ctx);

  /// Describes every table of a database (cache misses call the reviewer).
  std::vector<TableDescription> describe_schema(const std::string& db_id, RunContext& ctx);

  /// Builds the note index for a patient ahead of time.
  std::shared_ptr<const notes::NoteIndex> note_index(const std::string& patient, RunContext& ctx);

  const Components& components() const { return c_; }
  const PipelineConfig& config() const { return config_; }

 private:
  const Profile& profile_for(const AskOptions& options) const;

  Components c_;
  PipelineConfig config_;
  std::unique_ptr<structured::TableSelector> selector_;
  std::map<std::string, DatabaseEntry> databases_;
};

/// Response payload for one answered question: SQL text, row count and rows,
/// note chunk ids with timestamps and scores.
Json evidence_summary(const synthesis::EvidenceBundle& bundle, const std::optional<structured::StructuredRun>& run);

/// Append-only JSON-lines trace file with an in-memory index by trace id.
class TraceStore {
 public:
  TraceStore() = default;
  explicit TraceStore(std::filesystem::path file);

  void append(const TraceRecord& record);
  std::optional<TraceRecord> get(const std::string& trace_id) const;
  std::size_t size() const;

 private:
  std::optional<std::filesystem::path> file_;
  mutable std::mutex mu_;
  std::map<std::string, TraceRecord> records_;
};

struct LlmConfig {
  std::string backend = "scripted";  // scripted | remote
  std::filesystem::path script;
  llm::RemoteChatConfig remote;
};

struct EmbeddingConfig {
  std::string backend = "hash";  // hash | remote
  std::size_t dimension = 64;
  embed::RemoteEmbeddingConfig remote;
};

struct DatabaseConfig {
  std::string id;
  std::filesystem::path path;
  std::string profile = "fixture";
  std::string patient_id_query;
};

struct ServiceConfig {
  std::vector<DatabaseConfig> databases;
  std::optional<std::filesystem::path> notes;
  LlmConfig llm;
  EmbeddingConfig embedding;
  PipelineConfig pipeline;
  std::string bind_address = "127.0.0.1";
  int port = 8080;
  std::size_t workers = 4;
  std::optional<std::filesystem::path> trace_store;
  std::optional<std::filesystem::path> description_cache;
  std::optional<std::filesystem::path> index_dir;
  std::optional<std::filesystem::path> prompt_dir;
  std::optional<std::filesystem::path> static_dir;
  /// Virtual per-request clocks; the default for scripted backends.
  std::optional<bool> virtual_clock;

  bool uses_virtual_clock() const { return virtual_clock.value_or(llm.backend == "scripted"); }
};

/// Reads the JSON config (if any) and applies EHRNAV_* environment overrides.
/// Precedence: environment, then file, then defaults. API keys are only
/// ever named by environment variable; a literal key in the file is an error.
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file);

/// Overrides from an explicit variable map (used by load_service_config with
/// the process environment).
void apply_env_overrides(ServiceConfig& config, const std::map<std::string, std::string>& env);

/// Throws Error(config) when a referenced path is missing or a bound is violated.
void validate(const ServiceConfig& config);

std::shared_ptr<llm::ChatBackend> make_chat_backend(const LlmConfig& config);
std::shared_ptr<embed::EmbeddingBackend> make_embedding_backend(const EmbeddingConfig& config);

/// Wires backends, caches and databases from a validated config.
std::unique_ptr<Navigator> build_navigator(const ServiceConfig& config);

}  // namespace ehrnav
