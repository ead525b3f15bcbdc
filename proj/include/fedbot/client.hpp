#pragma once

// Federated participant: local training on received global weights, local
// evaluation, and the private store of pairs added on this node.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <type_traits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedbot/combiner.hpp"
#include "fedbot/config.hpp"
#include "fedbot/data.hpp"
#include "fedbot/net.hpp"
#include "fedbot/optim.hpp"
#include "fedbot/protocol.hpp"
#include "fedbot/tokenizer.hpp"
#include "fedbot/training.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {

enum class Optimizer { kSgd, kAdam };

inline Optimizer parse_optimizer(std::string_view s) {
  if (s == "sgd") return Optimizer::kSgd;
  if (s == "adam") return Optimizer::kAdam;
  throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + std::string(s) + "'");
}

struct LocalTrainConfig {
  std::size_t epochs = 1;
  double lr = 0.1;
  std::size_t batch_size = 32;
  Optimizer optimizer = Optimizer::kSgd;
  std::uint64_t seed = 0;
  bool dropout = false;
  // Adam only: when > 0 the step size is lr * transformer_lr(step, d_model, warmup).
  std::uint64_t warmup = 0;
  AdamOptions adam{};

  void validate() const {
    if (epochs < 1) throw ConfigError("local epochs must be at least 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  }
};

// Shuffle seed of client-local round t; the sequential baseline uses the same.
inline std::uint64_t round_seed(std::uint64_t seed, std::uint64_t t) { return mix_seed(seed, t); }

template <typename T>
struct LocalTrainResult {
  ModelWeights<T> weights;
  double train_loss = 0.0;  // final epoch, mean over target tokens
  double train_acc = 0.0;   // final epoch, percent
};

/// e epochs of: seeded shuffle, mini-batches (last one may be short), masked
/// cross-entropy, optimizer step.
template <typename T>
using EpochHook = std::function<void(std::size_t epoch, const LocalTrainResult<T>&)>;

template <typename T>
LocalTrainResult<T> client_update(const ModelWeights<T>& weights, const TransformerConfig& model,
                                  std::span<const Example> train, const LocalTrainConfig& cfg,
                                  const std::type_identity_t<EpochHook<T>>& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw ContractError("client_update needs a non-empty training set");
  check_layout(weights, model);
  TransformerConfig run_model = model;
  if (!cfg.dropout) run_model.dropout = run_model.attention_dropout = run_model.activation_dropout = 0.0;

  LocalTrainResult<T> out{weights, 0.0, 0.0};
  AdamState<T> adam;
  Rng dropout_rng(mix_seed(cfg.seed, 0xD0D0));
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t tokens = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const auto batch = make_batch(train, std::span<const std::size_t>(order).subspan(start, n));
      auto step = loss_and_grad(out.weights, run_model, batch, cfg.dropout ? &dropout_rng : nullptr);
      if (!std::isfinite(step.loss))
        throw NumericError("non-finite loss " + format_double(step.loss) + " at epoch " + std::to_string(epoch + 1) +
                           ", batch starting at " + std::to_string(start) + " (lr " + format_double(cfg.lr) + ")");
      loss_sum += step.loss * static_cast<double>(step.counted);
      tokens += step.counted;
      correct += step.correct;
      if (step.all_masked) continue;
      if (cfg.optimizer == Optimizer::kSgd) {
        sgd_step(out.weights, step.grads, static_cast<T>(cfg.lr));
      } else {
        const double lr = cfg.warmup ? cfg.lr * transformer_lr(adam.step + 1, model.d_model, cfg.warmup) : cfg.lr;
        adam_step(adam, out.weights, step.grads, static_cast<T>(lr), cfg.adam);
      }
    }
    if (tokens) {
      out.train_loss = loss_sum / static_cast<double>(tokens);
      out.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(tokens);
    }
    if (on_epoch) on_epoch(epoch + 1, out);
  }
  return out;
}

/// Teacher-forced token accuracy (percent) and mean masked loss, dropout off.
template <typename T>
EvalResult local_evaluate(const ModelWeights<T>& weights, const TransformerConfig& model,
                          std::span<const Example> validation) {
  if (validation.empty()) throw ContractError("local_evaluate needs a non-empty validation set");
  TransformerConfig eval_model = model;
  eval_model.dropout = eval_model.attention_dropout = eval_model.activation_dropout = 0.0;
  return evaluate(weights, eval_model, validation);
}

inline std::vector<Example> encode_pairs(const Vocabulary& vocab, const std::vector<ConversationPair>& pairs,
                                         std::size_t max_len) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(make_example(vocab, p.query, p.response, max_len));
  return out;
}

// ---------------------------------------------------------------------------
// Node

/// Global model as last installed from a ROUND_RESULT (or loaded from disk).
struct ServingModel {
  TransformerConfig config;
  ModelWeights<float> weights;
  std::uint32_t t = 0;
};

inline constexpr const char* kAdditionsFile = "additions.tsv";

/// Normalizes both sides; throws ContractError if either ends up empty.
inline ConversationPair checked_pair(std::string_view query, std::string_view response) {
  ConversationPair p{normalize(query), normalize(response), ""};
  if (p.query.empty()) throw ContractError("query is empty after normalization");
  if (p.response.empty()) throw ContractError("response is empty after normalization");
  return p;
}

/// Appends to <dir>/additions.tsv, the node-local store.
inline void append_local_pair(const std::filesystem::path& dir, const ConversationPair& p) {
  std::ofstream out(dir / kAdditionsFile, std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to " + (dir / kAdditionsFile).string());
  out << pairs_to_tsv({p});
  if (!out.flush()) throw IoError("write failed for " + (dir / kAdditionsFile).string());
}

class ClientNode {
 public:
  struct Snapshot {
    std::vector<ConversationPair> train;
    std::vector<ConversationPair> validation;
    std::uint64_t n_k() const { return train.size(); }
  };

  /// `store_dir` (optional) holds additions.tsv; pairs already there count
  /// as local additions.
  ClientNode(std::string id, Vocabulary vocab, ClientDataset data, LocalTrainConfig cfg,
             std::filesystem::path store_dir = {})
      : id_(std::move(id)), vocab_(std::move(vocab)), data_(std::move(data)), cfg_(cfg), store_dir_(std::move(store_dir)) {
    cfg_.validate();
    if (id_.empty()) throw ConfigError("client id must not be empty");
    if (!store_dir_.empty() && std::filesystem::exists(store_dir_ / kAdditionsFile))
      additions_ = read_tsv(store_dir_ / kAdditionsFile);
  }

  const std::string& id() const { return id_; }
  const Vocabulary& vocab() const { return vocab_; }
  const LocalTrainConfig& train_config() const { return cfg_; }

  std::uint64_t n_k() const { return snapshot().n_k(); }
  std::size_t additions_count() const {
    std::lock_guard lock(mutex_);
    return additions_.size();
  }
  std::size_t validation_count() const { return data_.validation.size(); }

  /// Stored on this node only; joins the training set from the next round.
  ConversationPair add_local_pair(std::string_view query, std::string_view response) {
    auto p = checked_pair(query, response);
    std::lock_guard lock(mutex_);
    if (!store_dir_.empty()) append_local_pair(store_dir_, p);
    additions_.push_back(p);
    return p;
  }

  /// Base data plus every local addition so far, including pairs appended
  /// to the store by another process (`client add-pair`).
  Snapshot snapshot() const {
    std::lock_guard lock(mutex_);
    if (!store_dir_.empty() && std::filesystem::exists(store_dir_ / kAdditionsFile))
      additions_ = read_tsv(store_dir_ / kAdditionsFile);
    Snapshot s{data_.train, data_.validation};
    s.train.insert(s.train.end(), additions_.begin(), additions_.end());
    return s;
  }

  /// Trains on a snapshot taken at round start. Throws BlobVersionError,
  /// FormatError/ConfigError for an unusable round and NumericError when
  /// training diverges.
  UpdateMsg train_on(const Snapshot& snap, const RoundStartMsg& msg) const {
    const auto model = parse_config(msg.model_config, "ROUND_START config");
    if (model.vocab_size != vocab_.size())
      throw ConfigError("round model has vocab_size " + std::to_string(model.vocab_size) + " but this node's vocabulary has " +
                        std::to_string(vocab_.size()) + " tokens");
    auto global = deserialize_weights(msg.weights);
    check_layout(global, model);
    {
      std::lock_guard lock(mutex_);
      model_ = model;
    }
    LocalTrainConfig cfg = cfg_;
    if (msg.epochs) cfg.epochs = msg.epochs;
    if (msg.lr > 0.0) cfg.lr = msg.lr;
    if (msg.batch_size) cfg.batch_size = msg.batch_size;
    cfg.seed = round_seed(cfg_.seed, msg.t);

    const auto train = encode_pairs(vocab_, snap.train, model.max_len);
    auto result = client_update(global, model, train, cfg);
    UpdateMsg u;
    u.client_id = id_;
    u.t = msg.t;
    u.n_k = snap.n_k();
    u.train_loss = result.train_loss;
    u.train_acc = result.train_acc;
    u.val_loss = u.val_acc = std::nan("");
    if (!snap.validation.empty()) {
      const auto val = encode_pairs(vocab_, snap.validation, model.max_len);
      const auto ev = local_evaluate(result.weights, model, val);
      u.val_loss = ev.loss;
      u.val_acc = ev.accuracy;
    }
    u.weights = serialize_weights(result.weights);
    return u;
  }

  UpdateMsg handle_round_start(const RoundStartMsg& msg) const { return train_on(snapshot(), msg); }

  /// Installs the new global model. Needs the model config, known from a
  /// ROUND_START or set_model_config(); without one the weights are ignored.
  void handle_round_result(const RoundResultMsg& msg) {
    std::optional<TransformerConfig> model;
    {
      std::lock_guard lock(mutex_);
      model = model_;
    }
    if (!model) return;
    auto serving = std::make_shared<ServingModel>(ServingModel{*model, deserialize_weights(msg.weights), msg.t});
    check_layout(serving->weights, *model);
    std::lock_guard lock(mutex_);
    global_ = std::move(serving);
    if (history_.empty() || history_.back().t < msg.metrics.t) history_.push_back(msg.metrics);
  }

  void set_model_config(const TransformerConfig& c) {
    std::lock_guard lock(mutex_);
    model_ = c;
  }

  void install_model(std::shared_ptr<const ServingModel> m) {
    std::lock_guard lock(mutex_);
    global_ = std::move(m);
  }

  std::shared_ptr<const ServingModel> global_model() const {
    std::lock_guard lock(mutex_);
    return global_;
  }

  std::vector<RoundMetrics> history() const {
    std::lock_guard lock(mutex_);
    return history_;
  }

 private:
  std::string id_;
  Vocabulary vocab_;
  ClientDataset data_;
  LocalTrainConfig cfg_;
  std::filesystem::path store_dir_;

  mutable std::mutex mutex_;
  mutable std::vector<ConversationPair> additions_;
  mutable std::optional<TransformerConfig> model_;
  std::shared_ptr<const ServingModel> global_;
  std::vector<RoundMetrics> history_;
};

/// Adapts a node to the in-process transport.
inline InProcessTransport::Participant in_process_participant(ClientNode& node) {
  return {node.id(), [&node] { return node.n_k(); },
          [&node](const RoundStartMsg& m) -> std::optional<UpdateMsg> { return node.handle_round_start(m); },
          [&node](const RoundResultMsg& m) { node.handle_round_result(m); }};
}

// ---------------------------------------------------------------------------
// Network loop

struct RunClientOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = kDefaultPort;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::milliseconds max_backoff{5000};
  std::size_t max_attempts = 0;  // consecutive failed connects before giving up; 0 = never
  std::size_t leave_after_rounds = 0;  // disconnect for good after this many updates; 0 = never
};

/// Long-running participant: JOIN, then answer every ROUND_START with an
/// UPDATE until the final ROUND_RESULT. Reconnects with capped exponential
/// backoff.
class ClientRunner {
 public:
  ClientRunner(ClientNode& node, RunClientOptions opt, LogSink log = stderr_log("client"))
      : node_(node), opt_(std::move(opt)), log_(std::move(log)) {}

  /// True when the federation finished, false when stopped or out of attempts.
  bool run() {
    auto backoff = opt_.initial_backoff;
    std::size_t failures = 0;
    while (!stop_) {
      try {
        auto stream = tcp_connect(opt_.host, opt_.port);
        {
          std::lock_guard lock(mutex_);
          if (stop_) return false;
          stream_ = stream.get();
        }
        failures = 0;
        backoff = opt_.initial_backoff;
        const bool finished = session(*stream);
        {
          std::lock_guard lock(mutex_);
          stream_ = nullptr;
        }
        if (finished) return true;
      } catch (const Error& e) {
        {
          std::lock_guard lock(mutex_);
          stream_ = nullptr;
        }
        if (stop_) break;
        ++failures;
        log_(std::string("connection to combiner failed: ") + e.what() + "; retrying in " +
             std::to_string(backoff.count()) + " ms");
        if (opt_.max_attempts && failures >= opt_.max_attempts) return false;
        std::unique_lock lock(mutex_);
        cv_.wait_for(lock, backoff, [&] { return stop_.load(); });
        backoff = std::min(backoff * 2, opt_.max_backoff);
      }
    }
    return false;
  }

  void stop() {
    std::lock_guard lock(mutex_);
    stop_ = true;
    if (stream_) stream_->shutdown();
    cv_.notify_all();
  }

  std::size_t rounds_completed() const { return rounds_; }

 private:
  // The protocol thread keeps reading (heartbeats, errors) while a worker
  // thread trains; the worker sends its UPDATE when done.
  bool session(TcpStream& s) {
    std::thread worker;
    struct Joiner {
      std::thread& t;
      ~Joiner() {
        if (t.joinable()) t.join();
      }
    } joiner{worker};
    s.send(JoinMsg{node_.id(), node_.n_k()});
    for (;;) {
      Message m;
      try {
        m = read_frame(s);
      } catch (const UnknownMessageType& e) {
        log_(std::string("ignoring frame: ") + e.what());
        continue;
      }
      if (auto* start = std::get_if<RoundStartMsg>(&m)) {
        if (worker.joinable()) worker.join();
        worker = std::thread([this, &s, msg = std::move(*start), snap = node_.snapshot()] { train(s, snap, msg); });
      } else if (auto* result = std::get_if<RoundResultMsg>(&m)) {
        if (worker.joinable()) worker.join();
        node_.handle_round_result(*result);
        if (result->final_round) return true;
      } else if (auto* err = std::get_if<ErrorMsg>(&m)) {
        log_("combiner reported error " + std::to_string(err->code) + ": " + err->text);
      } else if (std::holds_alternative<HeartbeatMsg>(m)) {
      } else {
        throw ProtocolError(std::string("unexpected ") + type_name(type_of(m)) + " from the combiner");
      }
    }
  }

  void train(TcpStream& s, const ClientNode::Snapshot& snap, const RoundStartMsg& msg) {
    try {
      try {
        s.send(node_.train_on(snap, msg));
        if (++rounds_ == opt_.leave_after_rounds) {
          log_("leaving after " + std::to_string(rounds_.load()) + " rounds");
          stop_ = true;
          s.shutdown();
          return;
        }
      } catch (const BlobVersionError& e) {
        log_(std::string("refusing round: ") + e.what());
        s.send(ErrorMsg{static_cast<std::uint16_t>(ErrorCode::kVersionMismatch), e.what()});
      } catch (const NumericError& e) {
        log_(std::string("local training failed, skipping round: ") + e.what());
        s.send(ErrorMsg{static_cast<std::uint16_t>(ErrorCode::kTrainingFailed), e.what()});
      } catch (const Disconnected&) {
        throw;
      } catch (const Error& e) {
        log_(std::string("refusing round: ") + e.what());
        s.send(ErrorMsg{static_cast<std::uint16_t>(ErrorCode::kRejected), e.what()});
      }
    } catch (const Error&) {
      s.shutdown();  // the reader sees the disconnect and reconnects
    }
  }

  ClientNode& node_;
  RunClientOptions opt_;
  LogSink log_;
  std::atomic<bool> stop_{false};
  std::atomic<std::size_t> rounds_{0};
  std::mutex mutex_;
  std::condition_variable cv_;
  TcpStream* stream_ = nullptr;
};

}  // namespace fedbot
