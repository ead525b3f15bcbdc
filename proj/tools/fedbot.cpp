// fedbot: data preparation, the centralized baseline, evaluation and a
// terminal chat loop.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <unistd.h>

#include "common.hpp"
#include "fedbot/chat_service.hpp"
#include "fedbot/client.hpp"
#include "fedbot/combiner.hpp"

using namespace fedbot;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVocabFile = "vocab.txt";
constexpr const char* kConfigFile = "model.config";

// A silo directory (train.tsv present) or a prepared tree whose
// subdirectories are silos, merged in name order.
ClientDataset read_merged(const fs::path& dir, RunManifest& manifest) {
  if (fs::exists(dir / "train.tsv")) {
    manifest.add_dataset(dir / "train.tsv");
    manifest.add_dataset(dir / "val.tsv");
    return read_client_dir(dir);
  }
  if (!fs::is_directory(dir)) throw IoError("no such data directory: " + dir.string());
  std::vector<fs::path> silos;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "train.tsv")) silos.push_back(e.path());
  if (silos.empty()) throw IoError(dir.string() + " has neither train.tsv nor silo subdirectories");
  std::sort(silos.begin(), silos.end());
  ClientDataset all;
  all.client_id = "central";
  for (const auto& s : silos) {
    auto c = read_client_dir(s);
    manifest.add_dataset(s / "train.tsv");
    manifest.add_dataset(s / "val.tsv");
    all.train.insert(all.train.end(), c.train.begin(), c.train.end());
    all.validation.insert(all.validation.end(), c.validation.begin(), c.validation.end());
  }
  return all;
}

int prepare(const std::string& input, std::size_t k, std::uint64_t seed, const fs::path& out, bool by_brand,
            std::size_t vocab_size, std::size_t min_freq, const std::string& vocab_in, const std::string& config_in,
            const std::vector<std::string>& argv) {
  const auto loaded = load_records(fs::path(input));
  const auto pairs = pair_conversations(loaded.records);
  if (pairs.empty()) throw SchemaError(input + ": no inbound tweet has an outbound reply");
  const auto clients = by_brand ? partition_by_brand(pairs) : partition(pairs, k, seed);

  std::size_t total = 0;
  std::vector<std::string> corpus;
  for (const auto& c : clients) {
    total += c.size();
    for (const auto& p : c.train) {
      corpus.push_back(p.query);
      corpus.push_back(p.response);
    }
  }
  if (total != pairs.size())
    throw ContractError("partition lost pairs: " + std::to_string(total) + " of " + std::to_string(pairs.size()));

  const Vocabulary vocab = vocab_in.empty() ? train_vocab(corpus, vocab_size, min_freq) : Vocabulary::load(vocab_in);
  TransformerConfig model = config_in.empty() ? TransformerConfig{} : load_config(config_in);
  model.vocab_size = vocab.size();

  write_partition(out, clients, seed, {{"input", input}, {"by_brand", by_brand ? "true" : "false"}});
  write_vocab(out / kVocabFile, vocab);
  write_text_file(out / kConfigFile, format_config(model));
  RunManifest manifest;
  manifest.command = "fedbot prepare";
  manifest.argv = argv;
  manifest.set_model_config(model);
  manifest.seeds["partition"] = seed;
  manifest.add_dataset(input);
  for (const auto& c : clients) {
    write_vocab(out / c.client_id / kVocabFile, vocab);
    manifest.outputs[c.client_id] = (out / c.client_id).string();
    std::cout << c.client_id << (c.brand.empty() ? "" : " (" + c.brand + ")") << ": " << c.train.size()
              << " train, " << c.validation.size() << " val\n";
  }
  manifest.outputs["vocab"] = (out / kVocabFile).string();
  manifest.outputs["config"] = (out / kConfigFile).string();
  manifest.write(out / "run.json");
  std::cout << pairs.size() << " pairs from " << loaded.records.size() << " records (" << loaded.skipped
            << " skipped), vocabulary " << vocab.size() << " tokens\n";
  return kExitOk;
}

struct CentralOptions {
  std::string data, config, vocab, out = "central.fbw", metrics_out, manifest, optimizer = "sgd";
  LocalTrainConfig train;
};

int train_central(CentralOptions o, const std::vector<std::string>& argv) {
  o.train.optimizer = parse_optimizer(o.optimizer);
  o.train.validate();
  const fs::path dir = o.data;
  RunManifest manifest;
  manifest.command = "fedbot train-central";
  manifest.argv = argv;
  const auto data = read_merged(dir, manifest);
  const auto vocab_path = o.vocab.empty() ? dir / kVocabFile : fs::path(o.vocab);
  if (!fs::exists(vocab_path)) throw IoError("missing vocabulary " + vocab_path.string() + " (use --vocab)");
  const auto vocab = Vocabulary::load(vocab_path.string());
  const auto config_path = o.config.empty() ? dir / kConfigFile : fs::path(o.config);
  if (!fs::exists(config_path)) throw IoError("missing model config " + config_path.string() + " (use --config)");
  const auto model = load_config(config_path);
  if (model.vocab_size != vocab.size())
    throw ConfigError(config_path.string() + ": vocab_size " + std::to_string(model.vocab_size) + " but " +
                      vocab_path.string() + " has " + std::to_string(vocab.size()) + " tokens");

  const auto train = encode_pairs(vocab, data.train, model.max_len);
  const auto val = encode_pairs(vocab, data.validation, model.max_len);
  const auto metrics_path = o.metrics_out.empty() ? sibling(o.out, ".metrics.tsv") : fs::path(o.metrics_out);
  if (metrics_path.has_parent_path()) fs::create_directories(metrics_path.parent_path());
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());

  auto started = Clock::now();
  const auto result = client_update(
      init_weights<float>(model, o.train.seed), model, train, o.train,
      [&](std::size_t epoch, const LocalTrainResult<float>& r) {
        RoundMetrics m{static_cast<std::uint32_t>(epoch), 1, r.train_acc, std::nan(""), r.train_loss, std::nan("")};
        if (!val.empty()) {
          const auto ev = local_evaluate(r.weights, model, val);
          m.mean_val_acc = ev.accuracy;
          m.mean_val_loss = ev.loss;
        }
        const auto row = format_metrics_row(m);
        metrics << row << '\n' << std::flush;
        std::cout << row << '\n' << std::flush;
        const auto now = Clock::now();
        manifest.round_seconds.push_back(std::chrono::duration<double>(now - started).count());
        started = now;
      });
  save_model(o.out, model, result.weights, vocab);

  manifest.set_model_config(model);
  manifest.seeds["train"] = o.train.seed;
  manifest.outputs["weights"] = o.out;
  manifest.outputs["metrics"] = metrics_path.string();
  manifest.write(o.manifest.empty() ? sibling(o.out, ".run.json") : fs::path(o.manifest));
  return kExitOk;
}

int evaluate_model(const std::string& weights, const std::string& data, const std::string& metrics_out) {
  const auto m = load_model(weights);
  if (!fs::exists(data)) throw IoError("missing data file " + data);
  const auto pairs = read_tsv(data);
  if (pairs.empty()) throw SchemaError(data + " holds no pairs");
  const auto r = local_evaluate(m.weights, m.config, encode_pairs(m.vocab, pairs, m.config.max_len));
  const RoundMetrics row{0, 1, std::nan(""), r.accuracy, std::nan(""), r.loss};
  std::cout << "accuracy " << format_double(r.accuracy) << " loss " << format_double(r.loss) << " tokens " << r.tokens
            << '\n';
  std::cout << format_metrics_row(row) << '\n';
  if (!metrics_out.empty()) write_text_file(metrics_out, format_metrics_row(row) + '\n');
  return kExitOk;
}

int chat_loop(const std::string& weights) {
  const auto m = load_model(weights);
  const ServingModel serving{m.config, m.weights, 0};
  const bool interactive = isatty(STDIN_FILENO);
  for (;;) {
    if (interactive) std::cerr << "> " << std::flush;
    std::string line;
    if (!std::getline(std::cin, line)) break;
    const auto text = normalize(line);
    if (text.empty()) continue;
    if (text == "quit" || text == "exit") break;
    std::cout << generate_reply(serving, m.vocab, text) << '\n' << std::flush;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tools::SignalWatcher signals;
  const auto args = tools::args_of(argc, argv);
  CLI::App app{"Federated chatbot tooling"};
  app.require_subcommand(1);

  auto* prep = app.add_subcommand("prepare", "Pair tweets and split them into client silos");
  std::string input, out, vocab_in, config_in;
  std::size_t clients = 10, vocab_size = 8192, min_freq = 2;
  std::uint64_t seed = 0;
  bool by_brand = false;
  prep->add_option("--input", input, "Tweet CSV")->required();
  prep->add_option("--clients", clients, "Number of clients")->capture_default_str();
  prep->add_option("--seed", seed, "Shuffle seed")->capture_default_str();
  prep->add_option("--out", out, "Output directory")->required();
  prep->add_flag("--by-brand", by_brand, "One client per answering brand");
  prep->add_option("--vocab-size", vocab_size, "Vocabulary size to learn")->capture_default_str();
  prep->add_option("--min-freq", min_freq, "Minimum pair count for a merge")->capture_default_str();
  prep->add_option("--vocab", vocab_in, "Use this vocabulary instead of learning one");
  prep->add_option("--config", config_in, "Model config to copy (vocab_size is overwritten)");

  auto* central = app.add_subcommand("train-central", "Train one model on all silos pooled");
  CentralOptions co;
  central->add_option("--data", co.data, "Silo directory or prepared tree")->required();
  central->add_option("--epochs", co.train.epochs, "Epochs")->capture_default_str();
  central->add_option("--config", co.config, "Model config (default: <data>/model.config)");
  central->add_option("--vocab", co.vocab, "Vocabulary (default: <data>/vocab.txt)");
  central->add_option("--lr", co.train.lr, "Learning rate")->capture_default_str();
  central->add_option("--batch", co.train.batch_size, "Mini-batch size")->capture_default_str();
  central->add_option("--optimizer", co.optimizer, "sgd or adam")->capture_default_str();
  central->add_option("--seed", co.train.seed, "Initialization, shuffle and dropout seed")->capture_default_str();
  central->add_option("--warmup", co.train.warmup, "Adam warmup steps (0: constant lr)")->capture_default_str();
  central->add_flag("--dropout", co.train.dropout, "Train with dropout on");
  central->add_option("--out", co.out, "Weights file")->capture_default_str();
  central->add_option("--metrics-out", co.metrics_out, "Per-epoch metrics (default: <out>.metrics.tsv)");
  central->add_option("--manifest", co.manifest, "Run manifest (default: <out>.run.json)");

  auto* eval = app.add_subcommand("evaluate", "Teacher-forced accuracy and loss on a TSV");
  std::string eval_weights, eval_data, eval_metrics;
  eval->add_option("--weights", eval_weights, "Weights file")->required();
  eval->add_option("--data", eval_data, "Pairs TSV")->required();
  eval->add_option("--metrics-out", eval_metrics, "Also write the metrics row here");

  auto* chat = app.add_subcommand("chat", "Chat with a model in the terminal");
  std::string chat_weights;
  chat->add_option("--weights", chat_weights, "Weights file")->required();

  return tools::run_app(app, argc, argv, [&]() -> int {
    if (*prep) return prepare(input, clients, seed, out, by_brand, vocab_size, min_freq, vocab_in, config_in, args);
    if (*central) return train_central(co, args);
    if (*eval) return evaluate_model(eval_weights, eval_data, eval_metrics);
    return chat_loop(chat_weights);
  });
}
