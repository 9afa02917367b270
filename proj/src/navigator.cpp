#include "ehrnav/navigator.hpp"

#include <cstdlib>
#include <fstream>

#include "ehrnav/error.hpp"
#include "ehrnav/text.hpp"

extern char** environ;

namespace ehrnav {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::structured: return "structured";
    case Modality::unstructured: return "unstructured";
    case Modality::multimodal: return "multimodal";
  }
  return "multimodal";
}

Modality parse_modality(std::string_view s) {
  if (s == "structured") return Modality::structured;
  if (s == "unstructured") return Modality::unstructured;
  if (s == "multimodal") return Modality::multimodal;
  throw Error(ErrorCode::invalid_argument, "unknown modality: " + std::string(s));
}

void validate(const PipelineConfig& config) {
  notes::validate(config.chunking);
  if (config.structured.max_attempts < 1) throw Error(ErrorCode::config, "max_attempts must be at least 1");
  if (!(config.structured.timeout_s > 0)) throw Error(ErrorCode::config, "timeout_s must be positive");
  if (config.table_k && *config.table_k < 1) throw Error(ErrorCode::config, "table_k must be at least 1");
  if (config.note_k && *config.note_k < 1) throw Error(ErrorCode::config, "note_k must be at least 1");
}

Navigator::Navigator(Components components, PipelineConfig config)
    : c_(std::move(components)), config_(std::move(config)) {
  validate(config_);
  if (!c_.gateway || !c_.embedder) throw Error(ErrorCode::config, "navigator needs a gateway and an embedder");
  if (!c_.prompts) c_.prompts = std::make_shared<PromptLibrary>();
  if (!c_.corpus) c_.corpus = std::make_shared<notes::NoteCorpus>();
  if (!c_.descriptions) c_.descriptions = std::make_shared<structured::DescriptionCache>();
  if (!c_.note_indexes) c_.note_indexes = std::make_shared<notes::NoteIndexStore>();
  selector_ = std::make_unique<structured::TableSelector>(*c_.embedder, config_.embed_table_names);
}

void Navigator::add_database(DatabaseEntry entry) {
  if (!is_known_profile(entry.profile)) throw Error(ErrorCode::config, "unknown profile: " + entry.profile);
  const std::string id = entry.id;
  databases_.insert_or_assign(id, std::move(entry));
}

const DatabaseEntry& Navigator::database(const std::string& id) const {
  auto it = databases_.find(id);
  if (it == databases_.end()) throw Error(ErrorCode::unknown_scope, "unknown database: " + id);
  return it->second;
}

bool Navigator::has_database(const std::string& id) const { return databases_.contains(id); }

std::vector<std::string> Navigator::database_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : databases_) ids.push_back(id);
  return ids;
}

const Profile& Navigator::profile_for(const AskOptions& options) const {
  const std::string& name = options.profile ? *options.profile : database(options.db_id).profile;
  if (!is_known_profile(name)) throw Error(ErrorCode::unknown_scope, "unknown profile: " + name);
  return builtin_profile(name);
}

bool Navigator::knows_patient(const std::string& db_id, const std::string& patient) const {
  if (c_.corpus->has_patient(patient)) return true;
  const auto& entry = database(db_id);
  if (entry.patient_id_query.empty()) return false;
  Question probe;
  probe.patient_scope = patient;
  const auto outcome = entry.db.execute(entry.patient_id_query, structured::scope_params(probe), 10.0);
  return outcome.ok() && !outcome.result->rows.empty();
}

void Navigator::check_request(const Question& q, const AskOptions& options) const {
  validate(q);
  database(options.db_id);
  profile_for(options);
  if (q.patient_scope && !knows_patient(options.db_id, *q.patient_scope)) {
    throw Error(ErrorCode::unknown_scope, "unknown patient: " + *q.patient_scope);
  }
}

std::shared_ptr<const notes::NoteIndex> Navigator::note_index(const std::string& patient, RunContext& ctx) {
  StepTimer timer(ctx.clock);
  const auto before_rebuilds = c_.note_indexes->rebuilds();
  const auto before_calls = c_.embedder->call_count();
  auto index = c_.note_indexes->build_index(patient, c_.corpus->for_patient(patient), config_.chunking, *c_.embedder);
  const bool rebuilt = c_.note_indexes->rebuilds() != before_rebuilds;
  ctx.trace.add(TraceStep{"note_indexer", rebuilt ? "note_index.build" : "note_index.reuse", text::digest(patient),
                          text::digest(index->corpus_fingerprint), timer.elapsed_ms(), 0, 0, 0.0,
                          std::to_string(index->chunks.size()) + " chunks, " +
                              std::to_string(c_.embedder->call_count() - before_calls) + " embedded"});
  return index;
}

std::vector<TableDescription> Navigator::describe_schema(const std::string& db_id, RunContext& ctx) {
  const auto& entry = database(db_id);
  std::vector<TableDescription> out;
  for (const auto& t : structured::discover_schema(entry.db).tables) {
    out.push_back(structured::describe_table(t, entry.id, *c_.gateway, *c_.prompts, *c_.descriptions, ctx));
  }
  return out;
}

AskResult Navigator::ask(const Question& q, const AskOptions& options, RunContext& ctx) {
  check_request(q, options);
  const Profile& profile = profile_for(options);
  const DatabaseEntry& entry = database(options.db_id);

  AskResult result;
  result.bundle.question = q;
  if (options.modality != Modality::unstructured) {
    structured::StructuredConfig sc = config_.structured;
    sc.table_k = config_.table_k.value_or(profile.table_k);
    const structured::StructuredDeps deps{entry.db, *c_.gateway, *selector_, *c_.descriptions, *c_.prompts, profile};
    auto run = structured::run_structured_pipeline(q, deps, sc, ctx);
    result.bundle.structured = run.evidence;
    result.structured_run = std::move(run);
  }
  if (options.modality != Modality::structured && q.patient_scope) {
    auto index = note_index(*q.patient_scope, ctx);
    StepTimer timer(ctx.clock);
    auto evidence = notes::retrieve_chunks(q, result.bundle.structured, *index,
                                           config_.note_k.value_or(profile.note_k), *c_.embedder);
    std::vector<std::string> keys;
    for (const auto& c : evidence.chunks) keys.push_back(notes::chunk_key(c.chunk));
    ctx.trace.add(TraceStep{"note_retriever", "note_index.top_k",
                            text::digest(notes::fused_query_text(q, result.bundle.structured)),
                            text::digest(text::join(keys, ",")), timer.elapsed_ms(), 0, 0, 0.0,
                            std::string(evidence.fallback_mode ? "fallback, " : "") + std::to_string(keys.size()) +
                                " chunks"});
    result.bundle.unstructured = std::move(evidence);
  }
  result.insufficient_evidence = result.bundle.empty();
  if (!options.synthesize) {
    result.answer.question_id = q.id;
    return result;
  }

  if (options.modality == Modality::unstructured && profile.name == "ehrnoteqa" && !result.insufficient_evidence) {
    std::vector<NoteChunk> chunks;
    for (const auto& c : result.bundle.unstructured->chunks) chunks.push_back(c.chunk);
    const std::string reply = synthesis::answer_notes_only(q, chunks, *c_.gateway, *c_.prompts, ctx);
    result.answer.question_id = q.id;
    result.answer.response_section = std::string(text::trim(reply));
    result.answer.raw_model_output = reply;
  } else {
    result.answer = synthesis::synthesize(result.bundle, *c_.gateway, *c_.prompts, ctx);
  }
  return result;
}

Json evidence_summary(const synthesis::EvidenceBundle& bundle, const std::optional<structured::StructuredRun>& run) {
  Json out = Json::object();
  out["insufficient_evidence"] = bundle.empty();
  if (bundle.structured) {
    const auto& s = *bundle.structured;
    Json rows = Json::array();
    for (const auto& row : s.rows) {
      Json r = Json::array();
      for (const auto& v : row) r.push_back(value_to_json(v));
      rows.push_back(std::move(r));
    }
    out["structured"] = Json{{"sql", s.sql},
                             {"columns", s.columns},
                             {"rows", std::move(rows)},
                             {"row_count", s.rows.size()},
                             {"attempt_count", s.attempt_count}};
  } else {
    out["structured"] = nullptr;
  }
  if (run) {
    Json attempts = Json::array();
    for (const auto& a : run->attempts) {
      attempts.push_back(Json{{"attempt", a.attempt_number},
                              {"sql", a.sql},
                              {"outcome", structured::to_string(a.outcome)},
                              {"message", a.message}});
    }
    out["attempts"] = std::move(attempts);
    out["selected_tables"] = run->selected_tables;
  }
  if (bundle.unstructured) {
    Json chunks = Json::array();
    for (const auto& c : bundle.unstructured->chunks) {
      chunks.push_back(Json{{"id", notes::chunk_key(c.chunk)},
                            {"note_id", c.chunk.note_id},
                            {"timestamp", format_iso(c.chunk.timestamp)},
                            {"score", c.score},
                            {"text", c.chunk.text}});
    }
    out["notes"] = Json{{"fallback_mode", bundle.unstructured->fallback_mode},
                        {"k_used", bundle.unstructured->k_used},
                        {"chunks", std::move(chunks)}};
  } else {
    out["notes"] = nullptr;
  }
  return out;
}

TraceStore::TraceStore(std::filesystem::path file) : file_(std::move(file)) {
  if (!std::filesystem::exists(*file_)) return;
  for (const auto& j : read_jsonl(*file_)) {
    TraceRecord r = j.get<TraceRecord>();
    records_.insert_or_assign(r.trace_id, std::move(r));
  }
}

void TraceStore::append(const TraceRecord& record) {
  std::lock_guard lock(mu_);
  if (file_) append_line(*file_, Json(record));
  records_.insert_or_assign(record.trace_id, record);
}

std::optional<TraceRecord> TraceStore::get(const std::string& trace_id) const {
  std::lock_guard lock(mu_);
  auto it = records_.find(trace_id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::size_t TraceStore::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

namespace {

template <typename T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

template <typename T>
void read_opt(const Json& j, const char* key, std::optional<T>& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

void read_path(const Json& j, const char* key, std::optional<std::filesystem::path>& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<std::string>();
}

void reject_literal_secret(const Json& j, const std::string& where) {
  for (const char* key : {"api_key", "key", "token", "secret"}) {
    if (j.contains(key)) {
      throw Error(ErrorCode::config, where + "." + key + ": secrets must be named via api_key_env, not written in the file");
    }
  }
}

std::size_t parse_size(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw Error(ErrorCode::config, name + ": expected a non-negative integer, got '" + v + "'");
  }
}

double parse_double(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::config, name + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& name, const std::string& v) {
  const std::string s = text::to_lower_ascii(v);
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw Error(ErrorCode::config, name + ": expected a boolean, got '" + v + "'");
}

}  // namespace

void apply_env_overrides(ServiceConfig& c, const std::map<std::string, std::string>& env) {
  auto get = [&](const char* name) -> const std::string* {
    auto it = env.find(name);
    return it == env.end() ? nullptr : &it->second;
  };
  if (auto v = get("EHRNAV_BIND")) c.bind_address = *v;
  if (auto v = get("EHRNAV_PORT")) c.port = static_cast<int>(parse_size("EHRNAV_PORT", *v));
  if (auto v = get("EHRNAV_WORKERS")) c.workers = parse_size("EHRNAV_WORKERS", *v);
  if (auto v = get("EHRNAV_NOTES")) c.notes = *v;
  if (auto v = get("EHRNAV_TRACE_STORE")) c.trace_store = *v;
  if (auto v = get("EHRNAV_DESCRIPTION_CACHE")) c.description_cache = *v;
  if (auto v = get("EHRNAV_INDEX_DIR")) c.index_dir = *v;
  if (auto v = get("EHRNAV_PROMPT_DIR")) c.prompt_dir = *v;
  if (auto v = get("EHRNAV_STATIC_DIR")) c.static_dir = *v;
  if (auto v = get("EHRNAV_LLM_BACKEND")) c.llm.backend = *v;
  if (auto v = get("EHRNAV_LLM_SCRIPT")) c.llm.script = *v;
  if (auto v = get("EHRNAV_LLM_ENDPOINT")) c.llm.remote.endpoint = *v;
  if (auto v = get("EHRNAV_LLM_MODEL")) c.llm.remote.model = *v;
  if (auto v = get("EHRNAV_LLM_API_KEY_ENV")) c.llm.remote.api_key_env = *v;
  if (auto v = get("EHRNAV_EMBEDDING_BACKEND")) c.embedding.backend = *v;
  if (auto v = get("EHRNAV_EMBEDDING_ENDPOINT")) c.embedding.remote.endpoint = *v;
  if (auto v = get("EHRNAV_EMBEDDING_MODEL")) c.embedding.remote.model = *v;
  if (auto v = get("EHRNAV_TABLE_K")) c.pipeline.table_k = parse_size("EHRNAV_TABLE_K", *v);
  if (auto v = get("EHRNAV_NOTE_K")) c.pipeline.note_k = parse_size("EHRNAV_NOTE_K", *v);
  if (auto v = get("EHRNAV_CHUNK_SIZE")) c.pipeline.chunking.chunk_size_tokens = parse_size("EHRNAV_CHUNK_SIZE", *v);
  if (auto v = get("EHRNAV_CHUNK_OVERLAP")) {
    c.pipeline.chunking.overlap_tokens = parse_size("EHRNAV_CHUNK_OVERLAP", *v);
  }
  if (auto v = get("EHRNAV_MAX_ATTEMPTS")) {
    c.pipeline.structured.max_attempts = static_cast<int>(parse_size("EHRNAV_MAX_ATTEMPTS", *v));
  }
  if (auto v = get("EHRNAV_TIMEOUT_S")) c.pipeline.structured.timeout_s = parse_double("EHRNAV_TIMEOUT_S", *v);
  if (auto v = get("EHRNAV_VIRTUAL_CLOCK")) c.virtual_clock = parse_bool("EHRNAV_VIRTUAL_CLOCK", *v);
}

ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file) {
  ServiceConfig c;
  if (file) {
    Json j;
    try {
      j = Json::parse(read_file(*file));
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::config, file->string() + ": " + e.what());
    }
    const auto base = file->parent_path();
    auto resolve = [&](const std::filesystem::path& p) { return p.is_relative() ? base / p : p; };
    try {
      for (const auto& d : j.value("databases", Json::array())) {
        DatabaseConfig db;
        db.id = d.at("id").get<std::string>();
        db.path = resolve(d.at("path").get<std::string>());
        read_opt(d, "profile", db.profile);
        read_opt(d, "patient_id_query", db.patient_id_query);
        c.databases.push_back(std::move(db));
      }
      read_path(j, "notes", c.notes);
      if (j.contains("llm")) {
        const Json& l = j.at("llm");
        reject_literal_secret(l, "llm");
        read_opt(l, "backend", c.llm.backend);
        if (l.contains("script")) c.llm.script = resolve(l.at("script").get<std::string>());
        read_opt(l, "endpoint", c.llm.remote.endpoint);
        read_opt(l, "api_key_env", c.llm.remote.api_key_env);
        read_opt(l, "model", c.llm.remote.model);
        read_opt(l, "cost_per_1k_tokens", c.llm.remote.cost_per_1k_tokens);
        read_opt(l, "timeout_s", c.llm.remote.timeout_s);
      }
      if (j.contains("embedding")) {
        const Json& e = j.at("embedding");
        reject_literal_secret(e, "embedding");
        read_opt(e, "backend", c.embedding.backend);
        read_opt(e, "dimension", c.embedding.dimension);
        read_opt(e, "endpoint", c.embedding.remote.endpoint);
        read_opt(e, "api_key_env", c.embedding.remote.api_key_env);
        read_opt(e, "model", c.embedding.remote.model);
        c.embedding.remote.dimension = c.embedding.dimension;
      }
      read_opt(j, "table_k", c.pipeline.table_k);
      read_opt(j, "note_k", c.pipeline.note_k);
      read_opt(j, "chunk_size", c.pipeline.chunking.chunk_size_tokens);
      read_opt(j, "chunk_overlap", c.pipeline.chunking.overlap_tokens);
      read_opt(j, "sentence_aware", c.pipeline.chunking.sentence_aware);
      read_opt(j, "max_attempts", c.pipeline.structured.max_attempts);
      read_opt(j, "timeout_s", c.pipeline.structured.timeout_s);
      read_opt(j, "embed_table_names", c.pipeline.embed_table_names);
      read_opt(j, "bind", c.bind_address);
      read_opt(j, "port", c.port);
      read_opt(j, "workers", c.workers);
      read_opt(j, "virtual_clock", c.virtual_clock);
      for (auto [key, slot] : {std::pair{"trace_store", &c.trace_store}, {"description_cache", &c.description_cache},
                               {"index_dir", &c.index_dir}, {"prompt_dir", &c.prompt_dir},
                               {"static_dir", &c.static_dir}}) {
        read_path(j, key, *slot);
        if (*slot) *slot = resolve(**slot);
      }
      if (c.notes) c.notes = resolve(*c.notes);
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::config, file->string() + ": " + e.what());
    }
  }
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string_view kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string_view::npos && kv.starts_with("EHRNAV_")) {
      env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
    }
  }
  apply_env_overrides(c, env);
  return c;
}

void validate(const ServiceConfig& c) {
  validate(c.pipeline);
  if (c.databases.empty()) throw Error(ErrorCode::config, "no databases configured");
  for (const auto& d : c.databases) {
    if (d.id.empty()) throw Error(ErrorCode::config, "database entry without id");
    if (!std::filesystem::exists(d.path)) throw Error(ErrorCode::config, "database file not found: " + d.path.string());
    if (!is_known_profile(d.profile)) throw Error(ErrorCode::config, "unknown profile: " + d.profile);
  }
  if (c.notes && !std::filesystem::exists(*c.notes)) {
    throw Error(ErrorCode::config, "notes file not found: " + c.notes->string());
  }
  if (c.llm.backend == "scripted") {
    if (!std::filesystem::exists(c.llm.script)) {
      throw Error(ErrorCode::config, "script file not found: " + c.llm.script.string());
    }
  } else if (c.llm.backend == "remote") {
    if (c.llm.remote.endpoint.empty() || c.llm.remote.model.empty()) {
      throw Error(ErrorCode::config, "remote llm backend needs endpoint and model");
    }
  } else {
    throw Error(ErrorCode::config, "unknown llm backend: " + c.llm.backend);
  }
  if (c.embedding.backend != "hash" && c.embedding.backend != "remote") {
    throw Error(ErrorCode::config, "unknown embedding backend: " + c.embedding.backend);
  }
  if (c.embedding.dimension < 1) throw Error(ErrorCode::config, "embedding dimension must be at least 1");
  if (c.port < 0 || c.port > 65535) throw Error(ErrorCode::config, "port out of range");
  if (c.workers < 1) throw Error(ErrorCode::config, "workers must be at least 1");
  if (c.prompt_dir && !std::filesystem::is_directory(*c.prompt_dir)) {
    throw Error(ErrorCode::config, "prompt directory not found: " + c.prompt_dir->string());
  }
  if (c.static_dir && !std::filesystem::is_directory(*c.static_dir)) {
    throw Error(ErrorCode::config, "static directory not found: " + c.static_dir->string());
  }
}

std::shared_ptr<llm::ChatBackend> make_chat_backend(const LlmConfig& config) {
  if (config.backend == "scripted") {
    return std::make_shared<llm::ScriptedBackend>(llm::ScriptedBackend::load_rules(config.script));
  }
  if (config.backend == "remote") return std::make_shared<llm::RemoteChatBackend>(config.remote);
  throw Error(ErrorCode::config, "unknown llm backend: " + config.backend);
}

std::shared_ptr<embed::EmbeddingBackend> make_embedding_backend(const EmbeddingConfig& config) {
  if (config.backend == "hash") return std::make_shared<embed::HashEmbedding>(config.dimension);
  if (config.backend == "remote") return std::make_shared<embed::RemoteEmbedding>(config.remote);
  throw Error(ErrorCode::config, "unknown embedding backend: " + config.backend);
}

std::unique_ptr<Navigator> build_navigator(const ServiceConfig& config) {
  validate(config);
  Navigator::Components c;
  c.gateway = std::make_shared<llm::Gateway>(make_chat_backend(config.llm));
  c.embedder = std::make_shared<embed::Embedder>(make_embedding_backend(config.embedding));
  c.prompts = config.prompt_dir ? std::make_shared<PromptLibrary>(*config.prompt_dir) : std::make_shared<PromptLibrary>();
  c.corpus = config.notes ? std::make_shared<notes::NoteCorpus>(notes::NoteCorpus::load(*config.notes))
                          : std::make_shared<notes::NoteCorpus>();
  c.descriptions = config.description_cache
                       ? std::make_shared<structured::DescriptionCache>(*config.description_cache)
                       : std::make_shared<structured::DescriptionCache>();
  c.note_indexes = config.index_dir ? std::make_shared<notes::NoteIndexStore>(*config.index_dir)
                                    : std::make_shared<notes::NoteIndexStore>();
  auto nav = std::make_unique<Navigator>(std::move(c), config.pipeline);
  for (const auto& d : config.databases) {
    nav->add_database(DatabaseEntry{d.id, sql::Database::open(d.path, d.id), d.profile, d.patient_id_query});
  }
  return nav;
}

}  // namespace ehrnav
