#include <CLI11.hpp>

#include <csignal>
#include <iostream>

#include "ehrnav/error.hpp"
#include "ehrnav/eval.hpp"
#include "ehrnav/http_service.hpp"
#include "ehrnav/navigator.hpp"
#include "ehrnav/text.hpp"

using namespace ehrnav;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kRequest = 3, kBackend = 4 };

struct CommonFlags {
  std::string config;
  std::string db;
  std::string db_id;
  std::string profile;
  std::string notes;
  std::string backend;
  std::string script;
  std::string endpoint;
  std::string model;
  std::string api_key_env;
  std::string embedding;
  std::string cache;
  std::string index_dir;
  std::string prompt_dir;
  int max_attempts = 0;
  double timeout_s = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool db_required) {
  cmd->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  auto* db = cmd->add_option("--db", f.db, "SQLite database file");
  if (db_required) db->required();
  cmd->add_option("--db-id", f.db_id, "identifier for --db (default: file stem)");
  cmd->add_option("--profile", f.profile, "dataset profile: " + text::join(profile_names(), ", "));
  cmd->add_option("--notes", f.notes, "notes file (JSON lines {id, patient, timestamp, text})");
  cmd->add_option("--backend", f.backend, "chat backend: scripted or remote")
      ->check(CLI::IsMember({"scripted", "remote"}));
  cmd->add_option("--script", f.script, "script file for the scripted backend");
  cmd->add_option("--endpoint", f.endpoint, "base URL of a chat-completions API");
  cmd->add_option("--model", f.model, "remote model name");
  cmd->add_option("--api-key-env", f.api_key_env, "environment variable holding the API key");
  cmd->add_option("--embedding", f.embedding, "embedding backend: hash or remote")
      ->check(CLI::IsMember({"hash", "remote"}));
  cmd->add_option("--cache", f.cache, "table description cache file");
  cmd->add_option("--index-dir", f.index_dir, "directory for persisted note indexes");
  cmd->add_option("--prompt-dir", f.prompt_dir, "directory with prompt template overrides");
  cmd->add_option("--max-attempts", f.max_attempts, "SQL repair attempts");
  cmd->add_option("--timeout", f.timeout_s, "SQL timeout in seconds");
}

ServiceConfig make_config(const CommonFlags& f) {
  ServiceConfig c = load_service_config(f.config.empty() ? std::nullopt : std::optional<std::filesystem::path>(f.config));
  if (!f.db.empty()) {
    DatabaseConfig d;
    d.path = f.db;
    d.id = f.db_id.empty() ? d.path.stem().string() : f.db_id;
    d.profile = f.profile.empty() ? "fixture" : f.profile;
    d.patient_id_query = c.databases.empty() ? "" : c.databases.front().patient_id_query;
    c.databases = {d};
  } else if (!f.profile.empty()) {
    for (auto& d : c.databases) d.profile = f.profile;
  }
  if (!f.notes.empty()) c.notes = f.notes;
  if (!f.backend.empty()) c.llm.backend = f.backend;
  if (!f.script.empty()) c.llm.script = f.script;
  if (!f.endpoint.empty()) c.llm.remote.endpoint = c.embedding.remote.endpoint = f.endpoint;
  if (!f.model.empty()) c.llm.remote.model = f.model;
  if (!f.api_key_env.empty()) c.llm.remote.api_key_env = c.embedding.remote.api_key_env = f.api_key_env;
  if (!f.embedding.empty()) c.embedding.backend = f.embedding;
  if (!f.cache.empty()) c.description_cache = f.cache;
  if (!f.index_dir.empty()) c.index_dir = f.index_dir;
  if (!f.prompt_dir.empty()) c.prompt_dir = f.prompt_dir;
  if (f.max_attempts > 0) c.pipeline.structured.max_attempts = f.max_attempts;
  if (f.timeout_s > 0) c.pipeline.structured.timeout_s = f.timeout_s;
  return c;
}

int exit_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::unknown_scope:
      return kRequest;
    case ErrorCode::config:
    case ErrorCode::dataset_format:
      return kUsage;
    default:
      return kBackend;
  }
}

void print_answer(const Json& response) {
  const Json& answer = response.at("answer");
  const Json& evidence = response.at("evidence");
  std::cout << "Response: " << answer.at("response_section").get<std::string>() << "\n";
  if (evidence.at("structured").is_null()) {
    std::cout << "SQL: (none)\n";
  } else {
    std::cout << "SQL: " << evidence["structured"]["sql"].get<std::string>() << "\n";
    std::cout << "Rows: " << evidence["structured"]["row_count"].get<std::size_t>() << " (attempts "
              << evidence["structured"]["attempt_count"].get<int>() << ")\n";
  }
  if (!evidence.at("notes").is_null()) {
    const Json& notes = evidence.at("notes");
    std::cout << "Notes:" << (notes["fallback_mode"].get<bool>() ? " (fallback)" : "") << "\n";
    for (const auto& c : notes.at("chunks")) {
      std::cout << "  " << c["id"].get<std::string>() << " " << c["timestamp"].get<std::string>() << "\n";
    }
  }
  std::cout << "Trace: " << response.at("trace_id").get<std::string>() << "\n";
}

int run_ask(const CommonFlags& f, const std::string& question, const std::string& patient,
            const std::string& admission, const std::string& modality, bool json) {
  const ServiceConfig config = make_config(f);
  auto navigator = build_navigator(config);
  TraceStore traces = config.trace_store ? TraceStore(*config.trace_store) : TraceStore();
  HttpService service(*navigator, traces, {1, config.uses_virtual_clock(), std::nullopt});
  Json body{{"question", question}, {"db", config.databases.front().id}, {"modality", modality}};
  if (!patient.empty()) body["patient_scope"] = patient;
  if (!admission.empty()) body["admission_scope"] = admission;
  if (!f.profile.empty()) body["profile"] = f.profile;
  const HttpResponse r = service.handle_ask(body.dump());
  if (r.status != 200) {
    std::cerr << "ehrnav: " << r.body["error"]["message"].get<std::string>() << "\n";
    if (json) std::cout << r.body.dump(2) << "\n";
    return r.status == 502 ? kBackend : kRequest;
  }
  if (json) std::cout << r.body.dump(2) << "\n";
  else print_answer(r.body);
  return kOk;
}

int run_eval(const CommonFlags& f, const std::string& dataset, const std::string& out, const std::string& verdicts,
             bool drop_timeouts, double gold_timeout, std::size_t parallel) {
  const ServiceConfig config = make_config(f);
  auto navigator = build_navigator(config);
  const auto& entry = navigator->database(config.databases.front().id);
  eval::LoadOptions load;
  load.profile = f.profile.empty() ? entry.profile : f.profile;
  load.gold_db = &entry.db;
  load.drop_gold_sql_timeouts = drop_timeouts;
  load.gold_sql_timeout_s = gold_timeout;
  const auto loaded = eval::load_dataset(dataset, load);
  if (loaded.dropped_gold_sql_timeouts > 0) {
    std::cout << "dropped " << loaded.dropped_gold_sql_timeouts << " item(s) with gold SQL timeouts\n";
  }
  eval::BenchmarkOptions options;
  options.db_id = entry.id;
  options.profile = load.profile;
  options.parallelism = parallel;
  options.virtual_clock = config.uses_virtual_clock();
  if (!verdicts.empty()) options.verdicts = eval::load_verdicts(verdicts);
  const auto report = eval::run_benchmark(loaded.items, *navigator, options);
  const std::string json = eval::report_json(report);
  if (!out.empty()) write_file(out, json);
  std::cout << eval::summary_table(report);
  return kOk;
}

int run_describe(const CommonFlags& f, bool json) {
  const ServiceConfig config = make_config(f);
  auto navigator = build_navigator(config);
  VirtualClock virtual_clock;
  SteadyClock steady_clock;
  Clock& clock = config.uses_virtual_clock() ? static_cast<Clock&>(virtual_clock) : static_cast<Clock&>(steady_clock);
  TraceRecorder trace("describe", "", clock);
  RunContext ctx{clock, trace};
  Json out = Json::array();
  for (const auto& id : navigator->database_ids()) {
    for (const auto& d : navigator->describe_schema(id, ctx)) {
      if (json) out.push_back(Json{{"db_id", id}, {"table", d.table}, {"description", d.description}});
      else std::cout << id << "." << d.table << ": " << d.description << "\n";
    }
  }
  if (json) std::cout << out.dump(2) << "\n";
  return kOk;
}

HttpService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int run_serve(const CommonFlags& f, const std::string& bind, int port, std::size_t workers,
              const std::string& static_dir) {
  ServiceConfig config = make_config(f);
  if (!bind.empty()) config.bind_address = bind;
  if (port >= 0) config.port = port;
  if (workers > 0) config.workers = workers;
  if (!static_dir.empty()) config.static_dir = static_dir;
  auto navigator = build_navigator(config);
  TraceStore traces = config.trace_store ? TraceStore(*config.trace_store) : TraceStore();
  HttpService service(*navigator, traces, {config.workers, config.uses_virtual_clock(), config.static_dir});
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "ehrnav: serving on " << config.bind_address << ":" << config.port << "\n";
  service.serve(config.bind_address, config.port);
  g_service = nullptr;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Question answering over an EHR database and clinical notes"};
  app.require_subcommand(1);

  CommonFlags ask_flags, eval_flags, describe_flags, serve_flags;
  std::string question, patient, admission, modality = "multimodal";
  bool ask_json = false;
  auto* ask = app.add_subcommand("ask", "Answer one question");
  add_common(ask, ask_flags, false);
  ask->add_option("question", question, "question text")->required();
  ask->add_option("--patient", patient, "patient in scope");
  ask->add_option("--admission", admission, "admission in scope");
  ask->add_option("--modality", modality, "structured, unstructured or multimodal")
      ->check(CLI::IsMember({"structured", "unstructured", "multimodal"}));
  ask->add_flag("--json", ask_json, "print the full JSON response");

  std::string dataset, out, verdicts;
  bool drop_timeouts = false;
  double gold_timeout = sql::kDefaultTimeoutS;
  std::size_t parallel = 1;
  auto* ev = app.add_subcommand("eval", "Run a benchmark file and write a report");
  add_common(ev, eval_flags, false);
  ev->add_option("--dataset", dataset, "benchmark file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", out, "report path");
  ev->add_option("--verdicts", verdicts, "human verdict file")->check(CLI::ExistingFile);
  ev->add_flag("--drop-gold-timeouts", drop_timeouts, "drop items whose gold SQL times out");
  ev->add_option("--gold-timeout", gold_timeout, "gold SQL timeout in seconds");
  ev->add_option("--parallel", parallel, "items run concurrently");

  bool describe_json = false;
  auto* describe = app.add_subcommand("describe-schema", "Describe every table (uses the cache)");
  add_common(describe, describe_flags, false);
  describe->add_flag("--json", describe_json, "print JSON");

  std::string bind, static_dir;
  int port = -1;
  std::size_t workers = 0;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  add_common(serve, serve_flags, false);
  serve->add_option("--bind", bind, "bind address");
  serve->add_option("--port", port, "port");
  serve->add_option("--workers", workers, "request worker threads");
  serve->add_option("--static", static_dir, "directory served at /");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ask) return run_ask(ask_flags, question, patient, admission, modality, ask_json);
    if (*ev) return run_eval(eval_flags, dataset, out, verdicts, drop_timeouts, gold_timeout, parallel);
    if (*describe) return run_describe(describe_flags, describe_json);
    if (*serve) return run_serve(serve_flags, bind, port, workers, static_dir);
  } catch (const Error& e) {
    std::cerr << "ehrnav: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ehrnav: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
