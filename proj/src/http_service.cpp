#include "ehrnav/http_service.hpp"

#include <httplib.h>

#include <random>

#include "ehrnav/error.hpp"
#include "ehrnav/text.hpp"

namespace ehrnav {

namespace {

std::string new_trace_id() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

HttpResponse error_response(int status, ErrorCode code, const std::string& message) {
  return HttpResponse{status, Json{{"error", Json{{"code", std::string(to_string(code))}, {"message", message}}}}};
}

std::optional<std::string> scope_field(const Json& body, const char* key) {
  if (!body.contains(key) || body.at(key).is_null()) return std::nullopt;
  const Json& v = body.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  throw Error(ErrorCode::invalid_argument, std::string(key) + " must be a string or an integer");
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
      return 400;
    case ErrorCode::unknown_scope:
      return 422;
    default:
      return 502;
  }
}

}  // namespace

HttpService::HttpService(Navigator& navigator, TraceStore& traces, Options options)
    : navigator_(navigator), traces_(traces), options_(std::move(options)) {}

HttpService::~HttpService() { stop(); }

HttpResponse HttpService::handle_ask(std::string_view raw) {
  Question q;
  AskOptions options;
  try {
    const Json body = Json::parse(raw);
    if (!body.is_object()) return error_response(400, ErrorCode::invalid_argument, "request body must be an object");
    if (!body.contains("question") || !body.at("question").is_string()) {
      return error_response(400, ErrorCode::invalid_argument, "question must be a string");
    }
    q.text = body.at("question").get<std::string>();
    q.patient_scope = scope_field(body, "patient_scope");
    q.admission_scope = scope_field(body, "admission_scope");
    if (body.contains("profile") && !body.at("profile").is_null()) options.profile = body.at("profile").get<std::string>();
    if (body.contains("modality")) options.modality = parse_modality(body.at("modality").get<std::string>());
    if (body.contains("db")) {
      options.db_id = body.at("db").get<std::string>();
    } else {
      const auto ids = navigator_.database_ids();
      if (ids.empty()) return error_response(422, ErrorCode::unknown_scope, "no databases registered");
      options.db_id = ids.front();
    }
    if (body.contains("window_from")) q.window_from = parse_instant(body.at("window_from").get<std::string>());
    if (body.contains("window_to")) q.window_to = parse_instant(body.at("window_to").get<std::string>());
    if (body.contains("sections")) q.section_hints = body.at("sections").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    return error_response(400, ErrorCode::invalid_argument, std::string("malformed request: ") + e.what());
  } catch (const Error& e) {
    return error_response(400, ErrorCode::invalid_argument, e.what());
  }

  const std::string trace_id = new_trace_id();
  q.id = trace_id;
  try {
    navigator_.check_request(q, options);
  } catch (const Error& e) {
    return error_response(status_for(e.code()), e.code(), e.what());
  }

  VirtualClock virtual_clock;
  Clock& clock = options_.virtual_clock ? static_cast<Clock&>(virtual_clock) : static_cast<Clock&>(steady_);
  TraceRecorder recorder(trace_id, q.id, clock);
  RunContext ctx{clock, recorder};
  try {
    const AskResult result = navigator_.ask(q, options, ctx);
    const TraceRecord trace = recorder.finish();
    traces_.append(trace);
    return HttpResponse{200, Json{{"answer", result.answer},
                                  {"evidence", evidence_summary(result.bundle, result.structured_run)},
                                  {"trace_id", trace_id},
                                  {"latency_ms", trace.total_latency_ms},
                                  {"cost", trace.total_cost}}};
  } catch (const Error& e) {
    const TraceRecord trace = recorder.finish();
    traces_.append(trace);
    HttpResponse r = error_response(status_for(e.code()), e.code(), e.what());
    if (const auto* parse = dynamic_cast<const AnswerParseError*>(&e)) r.body["raw_model_output"] = parse->raw_output();
    r.body["trace_id"] = trace_id;
    r.body["trace"] = trace;
    return r;
  }
}

HttpResponse HttpService::handle_trace(const std::string& trace_id) const {
  auto record = traces_.get(trace_id);
  if (!record) return error_response(404, ErrorCode::not_found, "unknown trace id: " + trace_id);
  return HttpResponse{200, Json(*record)};
}

HttpResponse HttpService::handle_schema(const std::string& db_id) const {
  if (!navigator_.has_database(db_id)) return error_response(404, ErrorCode::not_found, "unknown database: " + db_id);
  const DatabaseEntry& entry = navigator_.database(db_id);
  try {
    const auto catalog = structured::discover_schema(entry.db);
    Json tables = Json::array();
    for (const auto& t : catalog.tables) {
      Json tj = t;
      const auto cached = navigator_.components().descriptions->lookup(db_id, t.name, fingerprint_schema(t));
      tj["description"] = cached ? Json(cached->description) : Json(nullptr);
      tj["described"] = cached.has_value();
      tables.push_back(std::move(tj));
    }
    return HttpResponse{200, Json{{"db_id", catalog.db_id},
                                  {"profile", entry.profile},
                                  {"discovered_at", format_iso(catalog.discovered_at)},
                                  {"tables", std::move(tables)}}};
  } catch (const Error& e) {
    return error_response(502, e.code(), e.what());
  }
}

void HttpService::configure() {
  server_ = std::make_unique<httplib::Server>();
  const std::size_t workers = std::max<std::size_t>(1, options_.workers);
  server_->new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
  auto send = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Post("/ask", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_ask(req.body));
  });
  server_->Get(R"(/trace/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_trace(req.matches[1]));
  });
  server_->Get(R"(/schema/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_schema(req.matches[1]));
  });
  if (options_.static_dir) server_->set_mount_point("/", options_.static_dir->string());
}

int HttpService::start(const std::string& host, int port) {
  configure();
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void HttpService::serve(const std::string& host, int port) {
  configure();
  if (!server_->bind_to_port(host, port)) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  server_->listen_after_bind();
}

void HttpService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace ehrnav
