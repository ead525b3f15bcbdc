#pragma once

// HTTP front end of a node: chat against the current global model, feedback
// capture, private pair submission, metrics and federation status.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedbot/client.hpp"
#include "fedbot/combiner.hpp"
#include "fedbot/data.hpp"
#include "fedbot/http.hpp"
#include "fedbot/tokenizer.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {

inline std::string generate_reply(const ServingModel& m, const Vocabulary& vocab, std::string_view message) {
  const auto src = encode(vocab, message, m.config.max_len);
  const auto out = greedy_decode(m.weights, m.config, src);
  return decode(vocab, std::span<const std::int32_t>(out.ids).first(out.true_length));
}

// Mentions and URLs become placeholders before anything is written to disk.
inline std::string anonymize(std::string_view text) { return normalize(text); }

inline std::string new_session_id() {
  static std::mutex m;
  static std::random_device rd;
  static const char* hex = "0123456789abcdef";
  std::lock_guard lock(m);
  std::string id;
  for (int i = 0; i < 8; ++i) {
    const std::uint32_t v = rd();
    for (int k = 0; k < 4; ++k) {
      id.push_back(hex[(v >> (8 * k + 4)) & 0xF]);
      id.push_back(hex[(v >> (8 * k)) & 0xF]);
    }
  }
  return id;
}

struct ChatTurn {
  std::string user;
  std::string bot;
  std::int64_t timestamp = 0;  // unix seconds
};

struct FeedbackRecord {
  std::string session_id;
  std::size_t turn = 0;
  std::string rating;  // "up" or "down"
  std::optional<std::string> corrected_response;
  bool pair_added = false;
};

/// What the service needs from the process it runs in.
struct ChatBackend {
  std::function<std::shared_ptr<const ServingModel>()> model;
  // Stores a corrected pair on the bound node; empty when none is bound.
  std::function<void(const std::string& query, const std::string& response)> add_pair;
  std::function<nlohmann::json()> node_counts;
  std::function<std::vector<RoundMetrics>()> history;
};

inline ChatBackend node_backend(ClientNode& node) {
  return {[&node] { return node.global_model(); },
          [&node](const std::string& q, const std::string& r) { node.add_local_pair(q, r); },
          [&node] {
            return nlohmann::json{{"id", node.id()},
                                  {"n_k", node.n_k()},
                                  {"additions", node.additions_count()},
                                  {"validation", node.validation_count()}};
          },
          [&node] { return node.history(); }};
}

inline ChatBackend static_backend(std::shared_ptr<const ServingModel> model) {
  return {[model] { return model; }, {}, [] { return nlohmann::json::object(); }, [] {
            return std::vector<RoundMetrics>{};
          }};
}

struct ChatServiceOptions {
  std::filesystem::path store_dir{};  // sessions.jsonl / feedback.jsonl; empty: memory only
  std::string combiner_status{};    // host:port of the combiner status endpoint; empty: standalone
  std::string role = "client";
  int status_timeout_ms = 1000;
  std::string cors_origin = "*";
};

class ChatService {
 public:
  ChatService(Vocabulary vocab, ChatBackend backend, ChatServiceOptions opt = {})
      : vocab_(std::move(vocab)), backend_(std::move(backend)), opt_(std::move(opt)) {
    if (!opt_.store_dir.empty()) {
      std::filesystem::create_directories(opt_.store_dir);
      load();
    }
    http_.enable_cors(opt_.cors_origin);
    auto& r = http_.routes();
    r.Post("/chat", [this](const httplib::Request& q, httplib::Response& s) { chat(q, s); });
    r.Post("/feedback", [this](const httplib::Request& q, httplib::Response& s) { feedback(q, s); });
    r.Post("/pairs", [this](const httplib::Request& q, httplib::Response& s) { add_pair(q, s); });
    r.Get("/metrics", [this](const httplib::Request&, httplib::Response& s) { send_json(s, 200, metrics_json()); });
    add_status_route(http_, [this] { return status_json(); });
  }

  ~ChatService() { stop(); }
  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  std::uint16_t start(const std::string& host, std::uint16_t port) { return http_.start(host, port); }
  void stop() { http_.stop(); }
  std::uint16_t port() const { return http_.port(); }

  nlohmann::json metrics_json() const {
    const auto rows = backend_.history();
    nlohmann::json j{{"t", 0}, {"clients", 0}, {"rows", nlohmann::json::array()}};
    for (const auto& m : rows) j["rows"].push_back(fedbot::metrics_json(m));
    if (!rows.empty()) {
      j["t"] = rows.back().t;
      j["clients"] = rows.back().n_received;
    }
    return j;
  }

  nlohmann::json status_json() const {
    nlohmann::json j{{"role", opt_.role}, {"node", backend_.node_counts()}};
    const auto model = backend_.model();
    j["serving_round"] = model ? nlohmann::json(model->t) : nlohmann::json(nullptr);
    if (opt_.combiner_status.empty()) {
      j["status"] = "standalone";
      j["t"] = model ? model->t : 0;
      return j;
    }
    try {
      const auto [host, port] = parse_host_port(opt_.combiner_status);
      httplib::Client cli(host, port);
      const auto us = static_cast<time_t>(opt_.status_timeout_ms) * 1000;
      cli.set_connection_timeout(us / 1000000, us % 1000000);
      cli.set_read_timeout(us / 1000000, us % 1000000);
      auto res = cli.Get("/federation/status");
      if (!res || res->status != 200) throw IoError("combiner status unavailable");
      auto combiner = nlohmann::json::parse(res->body);
      j["status"] = "ok";
      j["t"] = combiner.value("t", 0);
      j["combiner"] = std::move(combiner);
    } catch (const std::exception& e) {
      j["status"] = "degraded";
      j["detail"] = std::string("combiner unreachable: ") + e.what();
      j["t"] = model ? model->t : 0;
      j["combiner"] = nullptr;
    }
    return j;
  }

  std::size_t session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
  }

 private:
  static std::int64_t now() {
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
  }

  void chat(const httplib::Request& req, httplib::Response& res) {
    const auto body = json_body(req, res);
    if (!body) return;
    const auto msg = body->find("message");
    if (msg == body->end() || !msg->is_string()) return send_error(res, 400, "'message' must be a string");
    const std::string user = anonymize(msg->get<std::string>());
    if (user.empty()) return send_error(res, 400, "message is empty");

    std::string sid;
    if (auto s = body->find("session_id"); s != body->end() && !s->is_null()) {
      if (!s->is_string()) return send_error(res, 400, "'session_id' must be a string");
      sid = s->get<std::string>();
      std::lock_guard lock(mutex_);
      if (!sessions_.count(sid)) return send_error(res, 404, "unknown session");
    }
    const auto model = backend_.model();  // this request keeps its snapshot
    if (!model) return send_error(res, 503, "federation not converged");
    const std::string bot = anonymize(generate_reply(*model, vocab_, user));

    ChatTurn turn{user, bot, now()};
    std::size_t index = 0;
    {
      std::lock_guard lock(mutex_);
      if (sid.empty()) {
        do sid = new_session_id();
        while (sessions_.count(sid));
      }
      auto& turns = sessions_[sid];
      index = turns.size();
      turns.push_back(turn);
      if (!opt_.store_dir.empty()) {
        std::ofstream out(opt_.store_dir / "sessions.jsonl", std::ios::app | std::ios::binary);
        out << nlohmann::json{{"session_id", sid},
                              {"turn", index},
                              {"user", turn.user},
                              {"bot", turn.bot},
                              {"timestamp", turn.timestamp}}
                   .dump()
            << '\n';
        if (!out.flush()) throw IoError("cannot append to sessions.jsonl");
      }
    }
    send_json(res, 200, {{"session_id", sid}, {"response", bot}, {"turn", index}, {"round", model->t}});
  }

  void feedback(const httplib::Request& req, httplib::Response& res) {
    const auto body = json_body(req, res);
    if (!body) return;
    FeedbackRecord rec;
    try {
      rec.session_id = body->at("session_id").get<std::string>();
      const auto& turn = body->at("turn");
      if (!turn.is_number_unsigned()) throw nlohmann::json::type_error::create(302, "turn", nullptr);
      rec.turn = turn.get<std::size_t>();
      rec.rating = body->at("rating").get<std::string>();
      if (auto c = body->find("corrected_response"); c != body->end() && !c->is_null())
        rec.corrected_response = anonymize(c->get<std::string>());
    } catch (const nlohmann::json::exception&) {
      return send_error(res, 400, "feedback needs session_id (string), turn (integer) and rating");
    }
    if (rec.rating != "up" && rec.rating != "down") return send_error(res, 400, "rating must be 'up' or 'down'");
    if (rec.corrected_response && rec.corrected_response->empty())
      return send_error(res, 400, "corrected_response is empty");

    std::lock_guard lock(mutex_);
    auto s = sessions_.find(rec.session_id);
    if (s == sessions_.end()) return send_error(res, 404, "unknown session");
    if (rec.turn >= s->second.size()) return send_error(res, 404, "unknown turn");
    const auto key = std::make_pair(rec.session_id, rec.turn);
    auto prev = feedback_.find(key);
    rec.pair_added = prev != feedback_.end() && prev->second.pair_added;
    bool added_now = false;
    if (rec.corrected_response && !rec.pair_added && backend_.add_pair) {
      try {
        backend_.add_pair(s->second[rec.turn].user, *rec.corrected_response);
      } catch (const ContractError& e) {
        return send_error(res, 400, e.what());
      }
      rec.pair_added = added_now = true;
    }
    feedback_[key] = rec;
    persist_feedback();
    send_json(res, 200, {{"ok", true}, {"pair_added", added_now}});
  }

  void add_pair(const httplib::Request& req, httplib::Response& res) {
    const auto body = json_body(req, res);
    if (!body) return;
    if (!backend_.add_pair) return send_error(res, 503, "no client node bound to this service");
    std::string q, r;
    try {
      q = body->at("query").get<std::string>();
      r = body->at("response").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      return send_error(res, 400, "pair needs 'query' and 'response' strings");
    }
    try {
      backend_.add_pair(q, r);
    } catch (const ContractError& e) {
      return send_error(res, 400, e.what());
    }
    send_json(res, 200, {{"ok", true}, {"node", backend_.node_counts()}});
  }

  // One line per (session, turn); rewritten atomically so a repeated
  // submission replaces the earlier record.
  void persist_feedback() const {
    if (opt_.store_dir.empty()) return;
    std::string text;
    for (const auto& [_, f] : feedback_) {
      nlohmann::json j{{"session_id", f.session_id}, {"turn", f.turn}, {"rating", f.rating}, {"pair_added", f.pair_added}};
      j["corrected_response"] = f.corrected_response ? nlohmann::json(*f.corrected_response) : nlohmann::json(nullptr);
      text += j.dump() + '\n';
    }
    write_text_file(opt_.store_dir / "feedback.jsonl", text);
  }

  void load() {
    auto each_line = [](const std::filesystem::path& p, auto&& fn) {
      std::ifstream in(p, std::ios::binary);
      for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.is_object()) fn(j);
      }
    };
    each_line(opt_.store_dir / "sessions.jsonl", [&](const nlohmann::json& j) {
      auto& turns = sessions_[j.value("session_id", "")];
      const auto index = j.value("turn", std::size_t{0});
      if (index == turns.size()) turns.push_back({j.value("user", ""), j.value("bot", ""), j.value("timestamp", 0LL)});
    });
    each_line(opt_.store_dir / "feedback.jsonl", [&](const nlohmann::json& j) {
      FeedbackRecord f{j.value("session_id", ""), j.value("turn", std::size_t{0}), j.value("rating", ""), std::nullopt,
                       j.value("pair_added", false)};
      if (j.contains("corrected_response") && j["corrected_response"].is_string())
        f.corrected_response = j["corrected_response"].get<std::string>();
      feedback_[{f.session_id, f.turn}] = f;
    });
  }

  Vocabulary vocab_;
  ChatBackend backend_;
  ChatServiceOptions opt_;
  HttpServer http_;

  mutable std::mutex mutex_;
  std::map<std::string, std::vector<ChatTurn>> sessions_;
  std::map<std::pair<std::string, std::size_t>, FeedbackRecord> feedback_;
};

}  // namespace fedbot
