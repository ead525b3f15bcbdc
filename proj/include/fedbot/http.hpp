#pragma once

// cpp-httplib server running on a background thread, plus JSON helpers.

#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "fedbot/error.hpp"
#include "fedbot/net.hpp"

namespace fedbot {

inline constexpr std::uint16_t kDefaultHttpPort = 8080;
inline constexpr std::uint16_t kDefaultStatusPort = 7178;

inline std::uint16_t default_http_port() { return port_from_env("FEDBOT_HTTP_PORT", kDefaultHttpPort); }

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

class HttpServer {
 public:
  HttpServer() = default;
  ~HttpServer() { stop(); }
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  httplib::Server& routes() { return server_; }

  // Answers CORS preflights and tags every response for cross-origin use.
  void enable_cors(const std::string& origin = "*") {
    server_.set_default_headers({{"Access-Control-Allow-Origin", origin},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Allow-Headers", "Content-Type"}});
    server_.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  }

  /// Binds (port 0 picks a free one) and serves on a background thread.
  std::uint16_t start(const std::string& host, std::uint16_t port) {
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });
    if (port == 0) {
      const int p = server_.bind_to_any_port(host);
      if (p <= 0) throw IoError("cannot bind an HTTP port on " + host);
      port_ = static_cast<std::uint16_t>(p);
    } else {
      if (!server_.bind_to_port(host, port)) throw IoError("cannot listen for HTTP on " + host + ":" + std::to_string(port));
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::uint16_t port() const { return port_; }

 private:
  httplib::Server server_;
  std::thread thread_;
  std::uint16_t port_ = 0;
};

/// Parses a JSON request body; nullopt (and a 400 reply) when it is not a
/// JSON object.
inline std::optional<nlohmann::json> json_body(const httplib::Request& req, httplib::Response& res) {
  auto j = nlohmann::json::parse(req.body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    send_error(res, 400, "request body must be a JSON object");
    return std::nullopt;
  }
  return j;
}

/// GET /federation/status answering with `status()`.
inline void add_status_route(HttpServer& http, std::function<nlohmann::json()> status) {
  http.routes().Get("/federation/status", [status = std::move(status)](const httplib::Request&,
                                                                       httplib::Response& res) {
    send_json(res, 200, status());
  });
}

}  // namespace fedbot
