#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "ehrnav/navigator.hpp"

namespace httplib {
class Server;
}

namespace ehrnav {

struct HttpResponse {
  int status = 200;
  Json body;
};

/// POST /ask, GET /trace/{id}, GET /schema/{db}. Handlers are plain
/// functions of the request so they can be exercised without a socket.
class HttpService {
 public:
  struct Options {
    std::size_t workers = 4;
    bool virtual_clock = false;
    std::optional<std::filesystem::path> static_dir;
  };

  HttpService(Navigator& navigator, TraceStore& traces, Options options);
  ~HttpService();

  HttpResponse handle_ask(std::string_view body);
  HttpResponse handle_trace(const std::string& trace_id) const;
  HttpResponse handle_schema(const std::string& db_id) const;

  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void serve(const std::string& host, int port);
  void stop();

 private:
  void configure();

  Navigator& navigator_;
  TraceStore& traces_;
  Options options_;
  SteadyClock steady_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace ehrnav
