#pragma once

// Server side of the federation: client selection, sample-weighted round
// aggregation, the across-round incremental merge, and the round loop.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fedbot/config.hpp"
#include "fedbot/error.hpp"
#include "fedbot/net.hpp"
#include "fedbot/protocol.hpp"
#include "fedbot/rng.hpp"
#include "fedbot/tensor.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {

using Clock = std::chrono::steady_clock;
using LogSink = std::function<void(const std::string&)>;

inline LogSink stderr_log(std::string prefix) {
  return [prefix = std::move(prefix)](const std::string& m) { std::clog << "[" << prefix << "] " << m << std::endl; };
}

// ---------------------------------------------------------------------------
// Pure operations

/// Seeded uniform sample without replacement of max(ceil(fraction * live),
/// min_clients) ids, returned sorted. nullopt when fewer than min_clients
/// are live (the round is postponed).
inline std::optional<std::vector<std::string>> select_clients(std::vector<std::string> live, double fraction,
                                                              std::size_t min_clients, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("client fraction must lie in (0, 1]");
  std::sort(live.begin(), live.end());
  live.erase(std::unique(live.begin(), live.end()), live.end());
  if (live.empty() || live.size() < min_clients) return std::nullopt;
  // the epsilon keeps 0.3 * 10 at 3 instead of 3.0000000000000004 -> 4
  std::size_t m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(live.size()) - 1e-9));
  m = std::clamp<std::size_t>(std::max(m, min_clients), 1, live.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) std::swap(live[i], live[i + rng.uniform_index(live.size() - i)]);
  live.resize(m);
  std::sort(live.begin(), live.end());
  return live;
}

template <typename T>
struct ClientUpdate {
  std::string client_id;
  std::uint64_t n_k = 0;
  ModelWeights<T> weights;
};

/// Per-tensor weighted average with weights n_k / sum(n_k) over the updates
/// given, accumulated in double.
template <typename T>
ModelWeights<T> aggregate_round(const std::vector<ClientUpdate<T>>& updates) {
  if (updates.empty()) throw ContractError("aggregate_round needs at least one update");
  const auto& ref = updates.front();
  for (const auto& u : updates) {
    if (u.n_k == 0) throw ContractError("client '" + u.client_id + "' reported n_k = 0");
    if (u.weights.size() != ref.weights.size())
      throw AggregationError("client '" + u.client_id + "' sent " + std::to_string(u.weights.size()) +
                             " tensors, client '" + ref.client_id + "' sent " + std::to_string(ref.weights.size()));
    for (std::size_t t = 0; t < ref.weights.size(); ++t) {
      const auto& a = ref.weights[t];
      const auto& b = u.weights[t];
      if (a.name != b.name || a.tensor.shape() != b.tensor.shape())
        throw AggregationError("client '" + u.client_id + "' tensor '" + b.name + "' " +
                               shape_string(b.tensor.shape()) + " does not match '" + a.name + "' " +
                               shape_string(a.tensor.shape()));
    }
  }
  if (updates.size() == 1) return ref.weights;

  double n = 0.0;
  for (const auto& u : updates) n += static_cast<double>(u.n_k);
  ModelWeights<T> out;
  std::vector<double> acc;
  for (std::size_t t = 0; t < ref.weights.size(); ++t) {
    acc.assign(ref.weights[t].tensor.size(), 0.0);
    for (const auto& u : updates) {
      const double w = static_cast<double>(u.n_k) / n;
      const auto src = u.weights[t].tensor.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(src[i]);
    }
    Tensor<T> x(ref.weights[t].tensor.shape());
    auto dst = x.data();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<T>(acc[i]);
    out.add(ref.weights[t].name, std::move(x));
  }
  return out;
}

/// w_prev + (w_round - w_prev) / t; t = 1 installs w_round unchanged.
template <typename T>
ModelWeights<T> incremental_merge(const ModelWeights<T>& w_prev, const ModelWeights<T>& w_round, std::uint64_t t) {
  if (t < 1) throw ContractError("incremental_merge needs t >= 1, got " + std::to_string(t));
  if (!w_prev.same_layout(w_round)) throw AggregationError("incremental_merge: weight layouts differ");
  if (t == 1) return w_round;
  ModelWeights<T> out = w_prev;
  const double inv = 1.0 / static_cast<double>(t);
  for (std::size_t k = 0; k < out.size(); ++k) {
    auto o = out[k].tensor.data();
    const auto r = w_round[k].tensor.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double p = static_cast<double>(o[i]);
      o[i] = static_cast<T>(p + (static_cast<double>(r[i]) - p) * inv);
    }
  }
  return out;
}

enum class MergeMode { kIncremental, kReplace };

inline MergeMode parse_merge_mode(std::string_view s) {
  if (s == "incremental") return MergeMode::kIncremental;
  if (s == "replace") return MergeMode::kReplace;
  throw ConfigError("merge mode must be 'incremental' or 'replace', got '" + std::string(s) + "'");
}

inline const char* merge_mode_name(MergeMode m) { return m == MergeMode::kReplace ? "replace" : "incremental"; }

template <typename T>
ModelWeights<T> merge(MergeMode mode, const ModelWeights<T>& w_prev, const ModelWeights<T>& w_round, std::uint64_t t) {
  return mode == MergeMode::kReplace ? w_round : incremental_merge(w_prev, w_round, t);
}

// ---------------------------------------------------------------------------
// Metrics

/// Unweighted means of client-reported metrics. Validation means skip
/// clients that reported NaN (no validation data); NaN if none reported.
inline std::optional<RoundMetrics> mean_metrics(std::uint32_t t, const std::vector<UpdateMsg>& updates) {
  if (updates.empty()) return std::nullopt;
  RoundMetrics m;
  m.t = t;
  m.n_received = static_cast<std::uint32_t>(updates.size());
  double ta = 0, tl = 0, va = 0, vl = 0;
  std::size_t nv = 0;
  for (const auto& u : updates) {
    ta += u.train_acc;
    tl += u.train_loss;
    if (std::isfinite(u.val_acc) && std::isfinite(u.val_loss)) {
      va += u.val_acc;
      vl += u.val_loss;
      ++nv;
    }
  }
  const double n = static_cast<double>(updates.size());
  m.mean_train_acc = ta / n;
  m.mean_train_loss = tl / n;
  m.mean_val_acc = nv ? va / static_cast<double>(nv) : std::nan("");
  m.mean_val_loss = nv ? vl / static_cast<double>(nv) : std::nan("");
  return m;
}

inline std::string format_metrics_row(const RoundMetrics& m) {
  return std::to_string(m.t) + '\t' + std::to_string(m.n_received) + '\t' + format_double(m.mean_train_acc) + '\t' +
         format_double(m.mean_val_acc) + '\t' + format_double(m.mean_train_loss) + '\t' +
         format_double(m.mean_val_loss);
}

inline RoundMetrics parse_metrics_row(std::string_view line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    f.emplace_back(line.substr(start, tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (f.size() != 6) throw FormatError("metrics row needs 6 tab-separated fields, got " + std::to_string(f.size()));
  RoundMetrics m;
  m.t = static_cast<std::uint32_t>(parse_size(f[0], "t"));
  m.n_received = static_cast<std::uint32_t>(parse_size(f[1], "n_received"));
  m.mean_train_acc = parse_double(f[2], "mean_train_acc");
  m.mean_val_acc = parse_double(f[3], "mean_val_acc");
  m.mean_train_loss = parse_double(f[4], "mean_train_loss");
  m.mean_val_loss = parse_double(f[5], "mean_val_loss");
  return m;
}

inline nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json metrics_json(const RoundMetrics& m) {
  return {{"t", m.t},
          {"n_received", m.n_received},
          {"mean_train_acc", json_number(m.mean_train_acc)},
          {"mean_val_acc", json_number(m.mean_val_acc)},
          {"mean_train_loss", json_number(m.mean_train_loss)},
          {"mean_val_loss", json_number(m.mean_val_loss)}};
}

// ---------------------------------------------------------------------------
// Transport abstraction

struct ClientInfo {
  std::string id;
  std::uint64_t n_k = 0;
  bool live = false;
};

struct FederationEvent {
  enum Kind { kUpdate, kDeclined, kLeft } kind = kUpdate;
  std::string client_id;
  UpdateMsg update;
  std::string detail;
};

class FederationTransport {
 public:
  virtual ~FederationTransport() = default;
  virtual std::vector<ClientInfo> clients() = 0;
  /// True once at least n clients are live; false on timeout.
  virtual bool wait_for_clients(std::size_t n, std::chrono::milliseconds timeout) = 0;
  virtual void send_round_start(const std::vector<std::string>& ids, const RoundStartMsg& msg) = 0;
  /// Next event, or nullopt once the deadline passes (or, for transports
  /// that cannot produce further events, immediately).
  virtual std::optional<FederationEvent> next_event(Clock::time_point deadline) = 0;
  virtual void send_round_result(const RoundResultMsg& msg) = 0;
};

/// Clients living in the same process; round starts run synchronously.
class InProcessTransport : public FederationTransport {
 public:
  struct Participant {
    std::string id;
    std::function<std::uint64_t()> n_k;
    std::function<std::optional<UpdateMsg>(const RoundStartMsg&)> on_round_start;  // nullopt = silent
    std::function<void(const RoundResultMsg&)> on_round_result;
  };

  void add(Participant p) { participants_.push_back(std::move(p)); }

  std::vector<ClientInfo> clients() override {
    std::vector<ClientInfo> out;
    for (const auto& p : participants_) out.push_back({p.id, p.n_k ? p.n_k() : 0, true});
    return out;
  }
  bool wait_for_clients(std::size_t n, std::chrono::milliseconds) override { return participants_.size() >= n; }

  void send_round_start(const std::vector<std::string>& ids, const RoundStartMsg& msg) override {
    for (const auto& p : participants_) {
      if (std::find(ids.begin(), ids.end(), p.id) == ids.end()) continue;
      try {
        if (auto u = p.on_round_start(msg)) events_.push_back({FederationEvent::kUpdate, p.id, std::move(*u), {}});
      } catch (const std::exception& e) {
        events_.push_back({FederationEvent::kDeclined, p.id, {}, e.what()});
      }
    }
  }
  std::optional<FederationEvent> next_event(Clock::time_point) override {
    if (events_.empty()) return std::nullopt;
    auto e = std::move(events_.front());
    events_.pop_front();
    return e;
  }
  void send_round_result(const RoundResultMsg& msg) override {
    for (const auto& p : participants_)
      if (p.on_round_result) p.on_round_result(msg);
  }

 private:
  std::vector<Participant> participants_;
  std::deque<FederationEvent> events_;
};

// ---------------------------------------------------------------------------
// Round loop

struct CombinerConfig {
  std::size_t rounds = 1;
  double fraction = 1.0;
  std::size_t min_clients = 1;
  std::uint32_t timeout_ms = 600000;   // straggler deadline per round
  std::uint32_t enroll_timeout_ms = 0; // 0 waits forever for min_clients
  std::uint64_t seed = 0;
  MergeMode merge = MergeMode::kIncremental;
  // Broadcast local-training hyper-parameters; 0 leaves them to the clients.
  std::uint32_t epochs = 0;
  double lr = 0.0;
  std::uint32_t batch_size = 0;
  std::string metrics_out{};  // empty: no log file
};

struct GlobalEval {
  double accuracy = 0.0;
  double loss = 0.0;
};

struct RoundRecord {
  RoundMetrics metrics;
  std::vector<std::string> contributors;
  std::optional<GlobalEval> global_eval;
  double wall_seconds = 0.0;
};

struct FederationResult {
  ModelWeights<float> weights;
  std::vector<RoundRecord> history;
};

class Coordinator {
 public:
  using GlobalEvaluator = std::function<GlobalEval(const ModelWeights<float>&)>;

  Coordinator(CombinerConfig cfg, TransformerConfig model, FederationTransport& transport,
              LogSink log = stderr_log("combiner"))
      : cfg_(std::move(cfg)), model_(model), transport_(transport), log_(std::move(log)) {
    model_.validate();
    if (cfg_.rounds == 0) throw ConfigError("rounds must be at least 1");
    if (cfg_.min_clients == 0) throw ConfigError("min_clients must be at least 1");
    select_clients({"x"}, cfg_.fraction, 1, 0);  // validates the fraction
  }

  void set_initial_weights(ModelWeights<float> w) {
    check_layout(w, model_);
    initial_ = std::move(w);
  }
  void set_global_evaluator(GlobalEvaluator f) { evaluator_ = std::move(f); }

  /// Makes run() throw Interrupted at its next wait. Safe from any thread;
  /// stop the transport as well so a pending wait returns.
  void cancel() { cancelled_ = true; }

  FederationResult run() {
    FederationResult result;
    ModelWeights<float> global = initial_ ? *initial_ : init_weights<float>(model_, cfg_.seed);
    const std::string config_text = format_config(model_);
    std::ofstream metrics_log;
    if (!cfg_.metrics_out.empty()) {
      metrics_log.open(cfg_.metrics_out, std::ios::trunc);
      if (!metrics_log) throw IoError("cannot write metrics log " + cfg_.metrics_out);
    }
    set_state("running", 0);

    for (std::uint32_t t = 1; t <= cfg_.rounds; ++t) {
      const auto started = Clock::now();
      std::vector<UpdateMsg> received;
      std::vector<std::string> selected;
      for (int attempt = 0; received.empty(); ++attempt) {
        if (attempt == 2) {
          set_state("aborted", t - 1);
          throw AggregationError("round " + std::to_string(t) + " received no updates after one retry; aborting");
        }
        if (attempt == 1) log_("round " + std::to_string(t) + ": no updates received, retrying once");
        selected = select_round(t, attempt);
        RoundStartMsg start{t, cfg_.epochs, cfg_.lr, cfg_.batch_size, cfg_.timeout_ms, config_text,
                            serialize_weights(global)};
        transport_.send_round_start(selected, start);
        received = collect(t, selected, global);
      }
      std::sort(received.begin(), received.end(),
                [](const UpdateMsg& a, const UpdateMsg& b) { return a.client_id < b.client_id; });

      std::vector<ClientUpdate<float>> updates;
      for (const auto& u : received) updates.push_back({u.client_id, u.n_k, deserialize_weights(u.weights)});
      const auto round_weights = aggregate_round(updates);
      global = merge(cfg_.merge, global, round_weights, t);

      RoundRecord rec;
      rec.metrics = *mean_metrics(t, received);
      for (const auto& u : received) rec.contributors.push_back(u.client_id);
      if (evaluator_) rec.global_eval = evaluator_(global);
      rec.wall_seconds = std::chrono::duration<double>(Clock::now() - started).count();
      if (metrics_log.is_open()) metrics_log << format_metrics_row(rec.metrics) << '\n' << std::flush;
      log_("round " + std::to_string(t) + " done: " + std::to_string(received.size()) + "/" +
           std::to_string(selected.size()) + " updates, mean val acc " + format_double(rec.metrics.mean_val_acc));
      {
        std::lock_guard lock(status_mutex_);
        history_.push_back(rec);
        t_ = t;
      }
      result.history.push_back(std::move(rec));
      transport_.send_round_result({t, t == cfg_.rounds, result.history.back().metrics, serialize_weights(global)});
    }
    set_state("finished", static_cast<std::uint32_t>(cfg_.rounds));
    result.weights = std::move(global);
    return result;
  }

  nlohmann::json status_json() {
    nlohmann::json clients = nlohmann::json::array();
    for (const auto& c : transport_.clients())
      clients.push_back({{"id", c.id}, {"n_k", c.n_k}, {"live", c.live}});
    std::lock_guard lock(status_mutex_);
    nlohmann::json j{{"t", t_},
                     {"rounds", cfg_.rounds},
                     {"state", state_},
                     {"merge", merge_mode_name(cfg_.merge)},
                     {"clients", std::move(clients)},
                     {"last_round", nullptr},
                     {"history", nlohmann::json::array()}};
    for (const auto& r : history_) j["history"].push_back(metrics_json(r.metrics));
    if (!history_.empty()) {
      const auto& last = history_.back();
      j["last_round"] = metrics_json(last.metrics);
      j["last_round"]["contributors"] = last.contributors;
      if (last.global_eval)
        j["last_round"]["global_eval"] = {{"accuracy", json_number(last.global_eval->accuracy)},
                                          {"loss", json_number(last.global_eval->loss)}};
    }
    return j;
  }

 private:
  std::vector<std::string> select_round(std::uint32_t t, int attempt) {
    for (bool logged = false;; logged = true) {
      check_cancelled();
      const auto wait = std::chrono::milliseconds(cfg_.enroll_timeout_ms ? cfg_.enroll_timeout_ms : 2000);
      if (transport_.wait_for_clients(cfg_.min_clients, wait)) {
        std::vector<std::string> live;
        for (const auto& c : transport_.clients())
          if (c.live) live.push_back(c.id);
        if (auto s = select_clients(live, cfg_.fraction, cfg_.min_clients, mix_seed(cfg_.seed, 2 * t + attempt)))
          return *s;
      }
      if (!logged)
        log_("round " + std::to_string(t) + " postponed: fewer than " + std::to_string(cfg_.min_clients) +
             " live clients");
      set_state("waiting", t - 1);
      if (cfg_.enroll_timeout_ms)
        throw AggregationError("round " + std::to_string(t) + ": fewer than " + std::to_string(cfg_.min_clients) +
                               " clients enrolled within " + std::to_string(cfg_.enroll_timeout_ms) + " ms");
    }
  }

  std::vector<UpdateMsg> collect(std::uint32_t t, const std::vector<std::string>& selected,
                                 const ModelWeights<float>& global) {
    std::map<std::string, bool> pending;
    for (const auto& id : selected) pending[id] = true;
    std::vector<UpdateMsg> out;
    const auto deadline = Clock::now() + std::chrono::milliseconds(cfg_.timeout_ms);
    while (!pending.empty()) {
      check_cancelled();
      auto ev = transport_.next_event(deadline);
      if (!ev) break;
      if (!pending.count(ev->client_id)) continue;  // unselected, or already answered
      if (ev->kind == FederationEvent::kUpdate) {
        auto& u = ev->update;
        if (u.t != t) continue;  // stale round
        if (u.client_id != ev->client_id || u.n_k == 0) {
          log_("discarding malformed update from '" + ev->client_id + "'");
        } else {
          try {
            check_update_layout(deserialize_weights(u.weights), global, u.client_id);
            out.push_back(std::move(u));
          } catch (const Error& e) {
            log_("discarding update from '" + ev->client_id + "': " + e.what());
          }
        }
      } else {
        log_("client '" + ev->client_id + "' " + (ev->kind == FederationEvent::kLeft ? "left" : "declined") +
             " round " + std::to_string(t) + (ev->detail.empty() ? "" : ": " + ev->detail));
      }
      pending.erase(ev->client_id);
    }
    for (const auto& [id, _] : pending) log_("round " + std::to_string(t) + ": straggler '" + id + "' dropped");
    return out;
  }

  static void check_update_layout(const ModelWeights<float>& w, const ModelWeights<float>& global,
                                  const std::string& client) {
    if (w.size() != global.size()) throw AggregationError("client '" + client + "' sent a different tensor count");
    for (std::size_t k = 0; k < w.size(); ++k)
      if (w[k].name != global[k].name || w[k].tensor.shape() != global[k].tensor.shape())
        throw AggregationError("client '" + client + "' tensor '" + w[k].name + "' does not match '" +
                               global[k].name + "' " + shape_string(global[k].tensor.shape()));
  }

  void check_cancelled() {
    if (!cancelled_) return;
    set_state("interrupted", t_);
    throw Interrupted("federation interrupted");
  }

  void set_state(const char* s, std::uint32_t t) {
    std::lock_guard lock(status_mutex_);
    state_ = s;
    t_ = t;
  }

  CombinerConfig cfg_;
  TransformerConfig model_;
  FederationTransport& transport_;
  LogSink log_;
  std::optional<ModelWeights<float>> initial_;
  GlobalEvaluator evaluator_;
  std::atomic<bool> cancelled_{false};

  std::mutex status_mutex_;
  std::string state_ = "idle";
  std::uint32_t t_ = 0;
  std::vector<RoundRecord> history_;
};

// ---------------------------------------------------------------------------
// TCP transport: one handler thread per connection, updates enter a queue.

class TcpServerTransport : public FederationTransport {
 public:
  explicit TcpServerTransport(std::uint16_t port, const std::string& bind_host = "0.0.0.0",
                              LogSink log = stderr_log("combiner"))
      : listener_(port, bind_host), log_(std::move(log)) {
    accept_thread_ = std::thread([this] { accept_loop(); });
  }
  ~TcpServerTransport() override { stop(); }

  std::uint16_t port() const { return listener_.port(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    listener_.close();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> handlers;
    {
      std::lock_guard lock(mutex_);
      for (auto& [_, c] : conns_) c->stream->shutdown();
      handlers.swap(handlers_);
    }
    cv_.notify_all();
    for (auto& h : handlers) h.join();
  }

  std::vector<ClientInfo> clients() override {
    std::lock_guard lock(mutex_);
    std::vector<ClientInfo> out;
    for (const auto& [_, c] : conns_)
      if (!c->id.empty()) out.push_back({c->id, c->n_k, c->live});
    std::sort(out.begin(), out.end(), [](const ClientInfo& a, const ClientInfo& b) { return a.id < b.id; });
    return out;
  }

  bool wait_for_clients(std::size_t n, std::chrono::milliseconds timeout) override {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return live_count_locked() >= n || stopping_; }) && !stopping_;
  }

  void send_round_start(const std::vector<std::string>& ids, const RoundStartMsg& msg) override {
    for (const auto& id : ids) send_to(id, msg);
  }

  std::optional<FederationEvent> next_event(Clock::time_point deadline) override {
    std::unique_lock lock(mutex_);
    if (!cv_.wait_until(lock, deadline, [&] { return !events_.empty() || stopping_; }) || events_.empty())
      return std::nullopt;
    auto e = std::move(events_.front());
    events_.pop_front();
    return e;
  }

  void send_round_result(const RoundResultMsg& msg) override {
    for (const auto& c : clients())
      if (c.live) send_to(c.id, msg);
  }

 private:
  struct Conn {
    std::unique_ptr<TcpStream> stream;
    std::string id;
    std::uint64_t n_k = 0;
    bool live = false;
  };

  std::size_t live_count_locked() const {
    std::size_t n = 0;
    for (const auto& [_, c] : conns_) n += c->live ? 1 : 0;
    return n;
  }

  std::shared_ptr<Conn> find_live(const std::string& id) {
    std::lock_guard lock(mutex_);
    for (const auto& [_, c] : conns_)
      if (c->live && c->id == id) return c;
    return nullptr;
  }

  void send_to(const std::string& id, const Message& msg) {
    auto c = find_live(id);
    if (!c) return;
    try {
      c->stream->send(msg);
    } catch (const Error& e) {
      log_("send to '" + id + "' failed: " + e.what());
      c->stream->shutdown();  // the handler thread reports the departure
    }
  }

  void accept_loop() {
    std::uint64_t next = 0;
    while (!stopping_) {
      auto s = listener_.accept(200);
      if (!s) continue;
      auto conn = std::make_shared<Conn>();
      conn->stream = std::move(s);
      std::lock_guard lock(mutex_);
      if (stopping_) break;
      const auto key = next++;
      conns_[key] = conn;
      handlers_.emplace_back([this, conn, key] { handle(conn, key); });
    }
  }

  void push_event(FederationEvent e) {
    {
      std::lock_guard lock(mutex_);
      events_.push_back(std::move(e));
    }
    cv_.notify_all();
  }

  void handle(std::shared_ptr<Conn> conn, std::uint64_t key) {
    try {
      for (;;) {
        Message m;
        try {
          m = read_frame(*conn->stream);
        } catch (const UnknownMessageType& e) {
          log_(std::string("ignoring frame: ") + e.what());
          continue;
        }
        if (auto* j = std::get_if<JoinMsg>(&m)) {
          if (j->client_id.empty()) throw ProtocolError("JOIN with an empty client id");
          std::shared_ptr<Conn> replaced;
          {
            std::lock_guard lock(mutex_);
            for (auto& [k, c] : conns_)
              if (k != key && c->live && c->id == j->client_id) replaced = c;
            if (replaced) replaced->live = false;
            conn->id = j->client_id;
            conn->n_k = j->n_k;
            conn->live = true;
          }
          if (replaced) replaced->stream->shutdown();
          cv_.notify_all();
          log_("client '" + j->client_id + "' joined with n_k = " + std::to_string(j->n_k));
        } else if (conn->id.empty()) {
          throw ProtocolError(std::string("expected JOIN, got ") + type_name(type_of(m)));
        } else if (auto* u = std::get_if<UpdateMsg>(&m)) {
          {
            std::lock_guard lock(mutex_);
            conn->n_k = std::max(conn->n_k, u->n_k);
          }
          push_event({FederationEvent::kUpdate, conn->id, std::move(*u), {}});
        } else if (auto* err = std::get_if<ErrorMsg>(&m)) {
          push_event({FederationEvent::kDeclined, conn->id, {}, err->text});
        } else if (std::holds_alternative<HeartbeatMsg>(m)) {
          conn->stream->send(HeartbeatMsg{});
        } else {
          throw ProtocolError(std::string("unexpected ") + type_name(type_of(m)) + " from a client");
        }
      }
    } catch (const Disconnected&) {
    } catch (const ProtocolError& e) {
      log_(std::string("protocol error, closing connection: ") + e.what());
      try {
        conn->stream->send(ErrorMsg{static_cast<std::uint16_t>(ErrorCode::kBadMessage), e.what()});
      } catch (const Error&) {
      }
    } catch (const Error& e) {
      log_(std::string("connection failed: ") + e.what());
    }
    bool was_live = false;
    {
      std::lock_guard lock(mutex_);
      was_live = conn->live;
      conn->live = false;
      conn->stream->shutdown();
      if (!stopping_) conns_.erase(key);
    }
    if (was_live) {
      log_("client '" + conn->id + "' disconnected");
      push_event({FederationEvent::kLeft, conn->id, {}, "connection closed"});
    }
  }

  TcpListener listener_;
  LogSink log_;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::uint64_t, std::shared_ptr<Conn>> conns_;
  std::vector<std::thread> handlers_;
  std::deque<FederationEvent> events_;
};

}  // namespace fedbot
