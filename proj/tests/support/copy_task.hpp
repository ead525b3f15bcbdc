#pragma once

// Synthetic echo corpus: the response repeats the query word for word.

#include <string>
#include <vector>

#include "fedbot/client.hpp"
#include "fedbot/data.hpp"
#include "fedbot/rng.hpp"
#include "fedbot/tokenizer.hpp"
#include "fedbot/training.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot::testing {

inline std::vector<std::string> copy_words(std::size_t n = 46) {
  std::vector<std::string> w;
  for (std::size_t i = 0; i < n; ++i) w.push_back("w" + std::to_string(i));
  return w;
}

inline Vocabulary copy_vocab() { return Vocabulary(copy_words()); }

inline TransformerConfig copy_model(const Vocabulary& v) {
  return {.vocab_size = v.size(), .d_model = 32, .n_heads = 2, .n_layers = 2, .d_ff = 64, .max_len = 10,
          .dropout = 0, .attention_dropout = 0, .activation_dropout = 0};
}

// `words` restricts the alphabet (indices into copy_words()).
inline std::vector<ConversationPair> copy_pairs(std::size_t n, std::uint64_t seed, std::vector<std::size_t> words = {},
                                                std::size_t min_len = 3, std::size_t max_len = 7) {
  const auto all = copy_words();
  if (words.empty())
    for (std::size_t i = 0; i < all.size(); ++i) words.push_back(i);
  Rng rng(seed);
  std::vector<ConversationPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
    std::string text;
    for (std::size_t k = 0; k < len; ++k) text += (k ? " " : "") + all[words[rng.uniform_index(words.size())]];
    out.push_back({text, text, ""});
  }
  return out;
}

// Echo model over the first ten words, trained until greedy decoding repeats
// most unseen queries (about 3 s in an optimized build).
struct EchoModel {
  Vocabulary vocab;
  TransformerConfig config;
  ModelWeights<float> weights;
};

inline std::vector<std::size_t> first_words(std::size_t n) {
  std::vector<std::size_t> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = i;
  return w;
}

inline EchoModel train_echo_model(std::uint64_t seed = 1) {
  EchoModel m{copy_vocab(), {}, {}};
  m.config = copy_model(m.vocab);
  const auto train = encode_pairs(m.vocab, copy_pairs(1500, seed, first_words(10)), m.config.max_len);
  LocalTrainConfig cfg{.epochs = 4, .lr = 3e-3, .batch_size = 16, .optimizer = Optimizer::kAdam, .seed = seed};
  m.weights = client_update(init_weights<float>(m.config, seed), m.config, train, cfg).weights;
  return m;
}

}  // namespace fedbot::testing
