// combiner serve: runs the federation rounds for TCP clients and exposes a
// status endpoint over HTTP.

#include <iostream>
#include <optional>

#include "common.hpp"
#include "fedbot/combiner.hpp"
#include "fedbot/http.hpp"

using namespace fedbot;

int main(int argc, char** argv) {
  tools::SignalWatcher signals;
  CLI::App app{"Federated averaging combiner"};
  app.require_subcommand(1);
  auto* serve = app.add_subcommand("serve", "Enroll clients and run the federation rounds");

  std::uint16_t port = default_port();
  std::string bind = "0.0.0.0";
  CombinerConfig cfg{.rounds = 10};
  std::string merge = "incremental";
  std::string config_path, weights_out, vocab_path, eval_data, manifest_path;
  std::uint16_t http_port = kDefaultStatusPort;

  serve->add_option("--port", port, "Client port (env FEDBOT_PORT)")->capture_default_str();
  serve->add_option("--bind", bind, "Listen address")->capture_default_str();
  serve->add_option("--rounds", cfg.rounds, "Federation rounds")->capture_default_str();
  serve->add_option("--fraction", cfg.fraction, "Share of live clients selected per round")->capture_default_str();
  serve->add_option("--min-clients", cfg.min_clients, "Clients required before a round starts")->capture_default_str();
  serve->add_option("--timeout-ms", cfg.timeout_ms, "Straggler deadline per round")->capture_default_str();
  serve->add_option("--enroll-timeout-ms", cfg.enroll_timeout_ms, "Give up waiting for clients after this (0: never)")
      ->capture_default_str();
  serve->add_option("--seed", cfg.seed, "Seed for the initial weights and client sampling")->capture_default_str();
  serve->add_option("--config", config_path, "Model config file (key = value)");
  serve->add_option("--metrics-out", cfg.metrics_out, "Per-round metrics log (TSV)");
  serve->add_option("--merge", merge, "incremental or replace")->capture_default_str();
  serve->add_option("--epochs", cfg.epochs, "Local epochs sent to clients (0: client's own)")->capture_default_str();
  serve->add_option("--lr", cfg.lr, "Learning rate sent to clients (0: client's own)")->capture_default_str();
  serve->add_option("--batch", cfg.batch_size, "Batch size sent to clients (0: client's own)")->capture_default_str();
  serve->add_option("--http-port", http_port, "Status endpoint port (0: disabled)")->capture_default_str();
  serve->add_option("--weights-out", weights_out, "Write the final global model here");
  serve->add_option("--vocab", vocab_path, "Vocabulary for --eval-data and --weights-out");
  serve->add_option("--eval-data", eval_data, "Held-out TSV scored with the global model every round");
  serve->add_option("--manifest", manifest_path, "Run manifest (JSON) written at the end");

  return tools::run_app(app, argc, argv, [&]() -> int {
    cfg.merge = parse_merge_mode(merge);
    const TransformerConfig model = config_path.empty() ? TransformerConfig{} : load_config(config_path);
    std::optional<Vocabulary> vocab;
    if (!vocab_path.empty()) vocab = Vocabulary::load(vocab_path);
    if (!eval_data.empty() && !vocab) throw ConfigError("--eval-data needs --vocab");

    RunManifest manifest;
    manifest.command = "combiner serve";
    manifest.argv = tools::args_of(argc, argv);
    manifest.set_model_config(model);
    manifest.seeds["combiner"] = cfg.seed;
    if (!cfg.metrics_out.empty()) manifest.outputs["metrics"] = cfg.metrics_out;
    if (!eval_data.empty()) manifest.add_dataset(eval_data);

    TcpServerTransport transport(port, bind);
    Coordinator coordinator(cfg, model, transport);
    if (!eval_data.empty()) {
      const auto val = encode_pairs(*vocab, read_tsv(eval_data), model.max_len);
      if (val.empty()) throw SchemaError(eval_data + " holds no pairs");
      coordinator.set_global_evaluator([val, model](const ModelWeights<float>& w) {
        const auto r = local_evaluate(w, model, val);
        return GlobalEval{r.accuracy, r.loss};
      });
    }
    HttpServer http;
    if (http_port) {
      add_status_route(http, [&coordinator] { return coordinator.status_json(); });
      http.enable_cors();
      http.start(bind, http_port);
    }
    auto on_signal = signals.scoped([&] {
      coordinator.cancel();
      transport.stop();
    });
    std::cerr << "combiner: listening on " << bind << ":" << transport.port()
              << (http_port ? ", status on port " + std::to_string(http.port()) : std::string()) << '\n';

    const auto result = coordinator.run();
    for (const auto& r : result.history) {
      manifest.round_seconds.push_back(r.wall_seconds);
      std::cout << format_metrics_row(r.metrics);
      if (r.global_eval) std::cout << "\tglobal_acc=" << format_double(r.global_eval->accuracy);
      std::cout << '\n';
    }
    if (!weights_out.empty()) {
      if (vocab) {
        save_model(weights_out, model, result.weights, *vocab);
      } else {
        const auto blob = serialize_weights(result.weights);
        write_text_file(weights_out, std::string_view(reinterpret_cast<const char*>(blob.data()), blob.size()));
        write_text_file(sibling(weights_out, ".config"), format_config(model));
      }
      manifest.outputs["weights"] = weights_out;
    }
    if (!manifest_path.empty()) manifest.write(manifest_path);
    // Let the clients read the final result before the sockets close.
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    transport.stop();
    return kExitOk;
  });
}
