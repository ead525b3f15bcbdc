// client join: trains on a local silo for the combiner, optionally serving
// chat. client add-pair: stores a private pair for the next round.

#include <condition_variable>
#include <filesystem>
#include <iostream>
#include <mutex>

#include "common.hpp"
#include "fedbot/chat_service.hpp"
#include "fedbot/client.hpp"

using namespace fedbot;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVocabFile = "vocab.txt";
constexpr const char* kModelFile = "global.fbw";

Vocabulary load_silo_vocab(const fs::path& dir) {
  if (!fs::exists(dir / kVocabFile))
    throw IoError("missing " + (dir / kVocabFile).string() + " (written by 'fedbot prepare')");
  return Vocabulary::load((dir / kVocabFile).string());
}

}  // namespace

int main(int argc, char** argv) {
  tools::SignalWatcher signals;
  CLI::App app{"Federated learning client node"};
  app.require_subcommand(1);

  auto* join = app.add_subcommand("join", "Join a combiner and train every round");
  std::string combiner = "127.0.0.1:" + std::to_string(default_port());
  std::string data_dir, id, optimizer = "sgd", combiner_status, model_out;
  LocalTrainConfig cfg;
  bool serve_chat = false;
  std::uint16_t http_port = default_http_port();
  std::string http_bind = "127.0.0.1";
  std::size_t max_attempts = 0;
  join->add_option("--combiner", combiner, "Combiner host:port")->capture_default_str();
  join->add_option("--data", data_dir, "Silo directory (train.tsv, val.tsv, vocab.txt)")->required();
  join->add_option("--epochs", cfg.epochs, "Local epochs per round")->capture_default_str();
  join->add_option("--lr", cfg.lr, "Learning rate")->capture_default_str();
  join->add_option("--batch", cfg.batch_size, "Mini-batch size")->capture_default_str();
  join->add_option("--optimizer", optimizer, "sgd or adam")->capture_default_str();
  join->add_option("--seed", cfg.seed, "Shuffle and dropout seed")->capture_default_str();
  join->add_option("--warmup", cfg.warmup, "Adam warmup steps (0: constant lr)")->capture_default_str();
  join->add_flag("--dropout", cfg.dropout, "Train with dropout on");
  join->add_option("--id", id, "Client id (default: silo directory name)");
  join->add_option("--max-attempts", max_attempts, "Give up after this many failed connects (0: never)")
      ->capture_default_str();
  join->add_option("--model-out", model_out, "Where the last global model is saved (default: <data>/global.fbw)");
  join->add_flag("--serve-chat", serve_chat, "Serve the chat HTTP API against the global model");
  join->add_option("--http-port", http_port, "Chat port (env FEDBOT_HTTP_PORT)")->capture_default_str();
  join->add_option("--http-bind", http_bind, "Chat listen address")->capture_default_str();
  join->add_option("--combiner-status", combiner_status,
                   "Combiner status endpoint host:port (default: combiner host, port 7178)");

  auto* add = app.add_subcommand("add-pair", "Store a private training pair on this node");
  std::string add_dir, query, response;
  add->add_option("--data", add_dir, "Silo directory")->required();
  add->add_option("--query", query, "Query text")->required();
  add->add_option("--response", response, "Response text")->required();

  return tools::run_app(app, argc, argv, [&]() -> int {
    if (*add) {
      if (!fs::is_directory(add_dir)) throw IoError("no such silo directory: " + add_dir);
      const auto p = checked_pair(query, response);
      append_local_pair(add_dir, p);
      std::cout << "stored pair for the next round: " << p.query << " -> " << p.response << '\n';
      return kExitOk;
    }

    cfg.optimizer = parse_optimizer(optimizer);
    cfg.validate();
    const fs::path dir = data_dir;
    auto data = read_client_dir(dir);
    if (id.empty()) id = fs::absolute(dir).lexically_normal().filename().string();
    const auto [host, port] = parse_host_port(combiner);
    ClientNode node(id, load_silo_vocab(dir), std::move(data), cfg, dir);
    const fs::path out = model_out.empty() ? dir / kModelFile : fs::path(model_out);

    std::unique_ptr<ChatService> chat;
    if (serve_chat) {
      if (fs::exists(out) && fs::exists(sibling(out, ".config"))) {
        const auto m = load_model(out);
        node.install_model(std::make_shared<ServingModel>(ServingModel{m.config, m.weights, 0}));
      }
      ChatServiceOptions opt{.store_dir = dir / "chat",
                             .combiner_status = combiner_status.empty()
                                                    ? host + ":" + std::to_string(kDefaultStatusPort)
                                                    : combiner_status};
      chat = std::make_unique<ChatService>(node.vocab(), node_backend(node), opt);
      std::cerr << "client: chat on http://" << http_bind << ":" << chat->start(http_bind, http_port) << '\n';
    }

    ClientRunner runner(node, {.host = host, .port = port, .max_attempts = max_attempts});
    std::mutex stop_mutex;
    std::condition_variable stop_cv;
    bool stopping = false;
    auto on_signal = signals.scoped([&] {
      runner.stop();
      std::lock_guard lock(stop_mutex);
      stopping = true;
      stop_cv.notify_all();
    });
    std::cerr << "client '" << id << "': " << node.n_k() << " training pairs, joining " << combiner << '\n';
    const bool finished = runner.run();

    if (auto m = node.global_model()) {
      save_model(out, m->config, m->weights, node.vocab());
      std::cerr << "client: saved round " << m->t << " global model to " << out.string() << '\n';
    }
    for (const auto& r : node.history()) std::cout << format_metrics_row(r) << '\n' << std::flush;
    if (chat && !signals.fired()) {
      // The federation is over; keep answering chats until told to stop.
      std::cerr << "client: federation " << (finished ? "finished" : "unreachable") << ", still serving chat\n";
      std::unique_lock lock(stop_mutex);
      stop_cv.wait(lock, [&] { return stopping; });
    }
    if (signals.fired()) return tools::kExitInterrupted;
    if (!finished) throw ProtocolError("could not reach the combiner at " + combiner);
    return kExitOk;
  });
}
