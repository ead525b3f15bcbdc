#pragma once

// Model files on disk, run manifests, and the error-to-exit-code map shared
// by the command line tools.
//
// A model is three files: <path> holds the weight blob, <path>.config the
// key = value model config and <path>.vocab the vocabulary, one token per
// line.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedbot/client.hpp"
#include "fedbot/config.hpp"
#include "fedbot/data.hpp"
#include "fedbot/hash.hpp"
#include "fedbot/protocol.hpp"
#include "fedbot/tokenizer.hpp"

namespace fedbot {

inline std::filesystem::path sibling(const std::filesystem::path& p, const char* suffix) {
  auto s = p;
  s += suffix;
  return s;
}

inline std::string vocab_text(const Vocabulary& v) {
  std::string out;
  for (const auto& t : v.tokens()) out += t + '\n';
  return out;
}

inline void write_vocab(const std::filesystem::path& path, const Vocabulary& v) { write_text_file(path, vocab_text(v)); }

struct StoredModel {
  TransformerConfig config;
  ModelWeights<float> weights;
  Vocabulary vocab;
};

inline void save_model(const std::filesystem::path& path, const TransformerConfig& config,
                       const ModelWeights<float>& weights, const Vocabulary& vocab) {
  check_layout(weights, config);
  if (config.vocab_size != vocab.size())
    throw ConfigError("model vocab_size " + std::to_string(config.vocab_size) + " does not match a vocabulary of " +
                      std::to_string(vocab.size()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto blob = serialize_weights(weights);
  write_text_file(path, std::string_view(reinterpret_cast<const char*>(blob.data()), blob.size()));
  write_text_file(sibling(path, ".config"), format_config(config));
  write_vocab(sibling(path, ".vocab"), vocab);
}

/// Throws IoError for missing files, FormatError for a bad blob and
/// ConfigError when the three files disagree.
inline StoredModel load_model(const std::filesystem::path& path) {
  for (const auto& p : {path, sibling(path, ".config"), sibling(path, ".vocab")})
    if (!std::filesystem::exists(p)) throw IoError("missing model file " + p.string());
  StoredModel m{load_config(sibling(path, ".config")), {}, Vocabulary::load(sibling(path, ".vocab").string())};
  const auto bytes = read_file(path);
  m.weights = deserialize_weights(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  check_layout(m.weights, m.config);
  if (m.config.vocab_size != m.vocab.size())
    throw ConfigError(path.string() + ": config vocab_size " + std::to_string(m.config.vocab_size) +
                      " does not match the " + std::to_string(m.vocab.size()) + "-token vocabulary");
  return m;
}

/// Everything needed to repeat a run; written once, atomically, at the end.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_sha256;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json datasets = nlohmann::json::object();  // file -> sha256
  nlohmann::json outputs = nlohmann::json::object();   // role -> path
  std::vector<double> round_seconds;

  nlohmann::json to_json() const {
    return {{"command", command},
            {"argv", argv},
            {"config_sha256", config_sha256},
            {"config", config},
            {"seeds", seeds},
            {"datasets", datasets},
            {"outputs", outputs},
            {"round_seconds", round_seconds},
            {"written_at", static_cast<std::int64_t>(std::time(nullptr))}};
  }

  void set_model_config(const TransformerConfig& c) {
    const auto text = format_config(c);
    config_sha256 = sha256_hex(text);
    for (const auto& [k, v] : to_key_values(c)) config[k] = v;
  }

  void add_dataset(const std::filesystem::path& p) {
    if (std::filesystem::exists(p)) datasets[p.string()] = sha256_file(p);
  }

  void write(const std::filesystem::path& path) const { write_text_file(path, to_json().dump(2) + '\n'); }
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const ProtocolError*>(&e) || dynamic_cast<const Disconnected*>(&e) ||
      dynamic_cast<const AggregationError*>(&e))
    return kExitProtocol;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitUsage;
  return kExitData;
}

}  // namespace fedbot
