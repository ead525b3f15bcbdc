#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedbot/autograd.hpp"
#include "fedbot/error.hpp"
#include "fedbot/rng.hpp"
#include "fedbot/tensor.hpp"
#include "fedbot/tokenizer.hpp"

namespace fedbot {

/// Encoder-decoder hyper-parameters. Defaults follow the underlined values
/// of the reference configuration; d_model uses the smallest listed width.
struct TransformerConfig {
  std::size_t vocab_size = 8192;
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t n_layers = 4;
  std::size_t d_ff = 512;
  std::size_t max_len = 30;
  double dropout = 0.2;             // residual / embedding dropout
  double attention_dropout = 0.2;
  double activation_dropout = 0.2;

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(kNumSpecials))
      throw ConfigError("vocab_size must exceed the " + std::to_string(kNumSpecials) + " special tokens");
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0)
      throw ConfigError("d_model, n_heads, n_layers and d_ff must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    for (double r : {dropout, attention_dropout, activation_dropout})
      if (r < 0.0 || r >= 1.0) throw ConfigError("dropout rates must lie in [0, 1)");
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const TransformerConfig&) const = default;
};

namespace detail {

struct WeightSpec {
  std::string name;
  Shape shape;
  enum Init { kLinear, kEmbedding, kZero, kOne } init;
};

inline void attention_specs(std::vector<WeightSpec>& out, const std::string& prefix, std::size_t d) {
  for (const char* p : {"q", "k", "v", "o"}) {
    out.push_back({prefix + ".w" + p, {d, d}, WeightSpec::kLinear});
    out.push_back({prefix + ".b" + p, {d}, WeightSpec::kZero});
  }
}

inline void norm_specs(std::vector<WeightSpec>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + ".gain", {d}, WeightSpec::kOne});
  out.push_back({prefix + ".bias", {d}, WeightSpec::kZero});
}

inline void ffn_specs(std::vector<WeightSpec>& out, const std::string& prefix, std::size_t d, std::size_t ff) {
  out.push_back({prefix + ".w1", {d, ff}, WeightSpec::kLinear});
  out.push_back({prefix + ".b1", {ff}, WeightSpec::kZero});
  out.push_back({prefix + ".w2", {ff, d}, WeightSpec::kLinear});
  out.push_back({prefix + ".b2", {d}, WeightSpec::kZero});
}

// Canonical weight layout; iteration order is part of the wire contract.
inline std::vector<WeightSpec> weight_specs(const TransformerConfig& c) {
  std::vector<WeightSpec> s;
  const std::size_t d = c.d_model;
  s.push_back({"embed.src", {c.vocab_size, d}, WeightSpec::kEmbedding});
  s.push_back({"embed.tgt", {c.vocab_size, d}, WeightSpec::kEmbedding});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "enc.L" + std::to_string(i);
    attention_specs(s, p + ".self_attn", d);
    norm_specs(s, p + ".norm1", d);
    ffn_specs(s, p + ".ffn", d, c.d_ff);
    norm_specs(s, p + ".norm2", d);
  }
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "dec.L" + std::to_string(i);
    attention_specs(s, p + ".self_attn", d);
    norm_specs(s, p + ".norm1", d);
    attention_specs(s, p + ".cross_attn", d);
    norm_specs(s, p + ".norm2", d);
    ffn_specs(s, p + ".ffn", d, c.d_ff);
    norm_specs(s, p + ".norm3", d);
  }
  s.push_back({"proj.out.weight", {d, c.vocab_size}, WeightSpec::kLinear});
  s.push_back({"proj.out.bias", {c.vocab_size}, WeightSpec::kZero});
  return s;
}

}  // namespace detail

/// Exact number of scalars in the canonical weight set.
inline std::size_t count_parameters(const TransformerConfig& c) {
  c.validate();
  std::size_t n = 0;
  for (const auto& spec : detail::weight_specs(c)) n += shape_size(spec.shape);
  return n;
}

/// Deterministic initialization: Glorot-uniform linear layers, normal(0,
/// d_model^-1/2) embeddings, zero biases, unit norm gains. Values are drawn
/// in double precision so every element type sees the same numbers.
template <typename T = float>
ModelWeights<T> init_weights(const TransformerConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ModelWeights<T> w;
  for (auto& spec : detail::weight_specs(c)) {
    Tensor<T> t(spec.shape, T{0});
    switch (spec.init) {
      case detail::WeightSpec::kLinear: {
        const double limit = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
        break;
      }
      case detail::WeightSpec::kEmbedding: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(c.d_model));
        for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
        break;
      }
      case detail::WeightSpec::kOne:
        for (auto& v : t.data()) v = T{1};
        break;
      case detail::WeightSpec::kZero:
        break;
    }
    w.add(std::move(spec.name), std::move(t));
  }
  return w;
}

// Checks that `w` has exactly the canonical layout of `c`.
template <typename T>
void check_layout(const ModelWeights<T>& w, const TransformerConfig& c) {
  const auto specs = detail::weight_specs(c);
  if (specs.size() != w.size())
    throw ConfigError("weights hold " + std::to_string(w.size()) + " tensors, model config expects " +
                      std::to_string(specs.size()));
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (w[i].name != specs[i].name || w[i].tensor.shape() != specs[i].shape)
      throw ConfigError("weight " + std::to_string(i) + " is '" + w[i].name + "' " +
                        shape_string(w[i].tensor.shape()) + ", model config expects '" + specs[i].name + "' " +
                        shape_string(specs[i].shape));
}

/// Sinusoidal position table: PE[p, 2i] = sin(p / 10000^(2i/d)),
/// PE[p, 2i+1] = cos(p / 10000^(2i/d)).
template <typename T = float>
Tensor<T> positional_encoding(std::size_t max_len, std::size_t d_model) {
  Tensor<T> pe(Shape{max_len, d_model}, T{0});
  for (std::size_t p = 0; p < max_len; ++p) {
    for (std::size_t j = 0; j < d_model; ++j) {
      const double i2 = static_cast<double>(j - (j % 2));
      const double angle = static_cast<double>(p) / std::pow(10000.0, i2 / static_cast<double>(d_model));
      pe.at(p, j) = static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
struct AttentionParams {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Projects queries/keys/values, runs `heads` parallel attentions over
/// d_model / heads wide slices, concatenates and applies the output
/// projection. Inputs are [batch * n, d_model] and [batch * m, d_model].
template <typename T>
Var<T> multi_head_attention(Var<T> x_q, Var<T> x_kv, const AttentionParams<T>& p, std::size_t batch,
                            std::size_t heads, const BoolTensor* mask, double attention_dropout = 0.0,
                            Rng* rng = nullptr) {
  const std::size_t d = x_q.value().cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("d_model (" + std::to_string(d) + ") is not divisible by head count " + std::to_string(heads));
  auto q = add_bias(matmul(x_q, p.wq), p.bq);
  auto k = add_bias(matmul(x_kv, p.wk), p.bk);
  auto v = add_bias(matmul(x_kv, p.wv), p.bv);
  auto heads_out = attention_heads(q, k, v, batch, heads, mask, attention_dropout, rng);
  return add_bias(matmul(heads_out, p.wo), p.bo);
}

// Key-padding mask [batch, n_queries, m]: key j of row b is visible iff its
// token is not PAD.
inline BoolTensor padding_mask(std::span<const std::int32_t> keys, std::size_t batch, std::size_t n_queries) {
  const std::size_t m = keys.size() / batch;
  BoolTensor mask(Shape{batch, n_queries, m}, true);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n_queries; ++i)
      for (std::size_t j = 0; j < m; ++j) mask.set((b * n_queries + i) * m + j, keys[b * m + j] != kPad);
  return mask;
}

// Lower-triangular mask [1, n, n].
inline BoolTensor causal_mask(std::size_t n) {
  BoolTensor mask(Shape{1, n, n}, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.set(i * n + j, true);
  return mask;
}

/// Binds a weight set into a graph and builds the encoder and decoder
/// stacks (post-norm residual blocks). Dropout is active only when a
/// generator is supplied.
template <typename T>
class Seq2Seq {
 public:
  Seq2Seq(Graph<T>& graph, const ModelWeights<T>& weights, const TransformerConfig& config, Rng* dropout_rng = nullptr)
      : g_(graph), w_(weights), c_(config), rng_(dropout_rng) {
    c_.validate();
    check_layout(w_, c_);
  }

  // Encoder output [batch * src_len, d_model].
  Var<T> encode(std::span<const std::int32_t> src, std::size_t batch) {
    const std::size_t len = src.size() / batch;
    check_ids(src, batch);
    auto x = embed("embed.src", src, len);
    const BoolTensor mask = padding_mask(src, batch, len);
    for (std::size_t i = 0; i < c_.n_layers; ++i) {
      const std::string p = "enc.L" + std::to_string(i);
      auto a = multi_head_attention(x, x, attn(p + ".self_attn"), batch, c_.n_heads, &mask, att_rate(), rng_);
      x = norm(p + ".norm1", add(x, dropout(a, res_rate(), rng_)));
      x = norm(p + ".norm2", add(x, dropout(ffn(p + ".ffn", x), res_rate(), rng_)));
    }
    return x;
  }

  // Decoder hidden states [batch * tgt_len, d_model]; `src` supplies the
  // memory padding mask.
  Var<T> decode_hidden(Var<T> memory, std::span<const std::int32_t> src, std::span<const std::int32_t> tgt_in,
                       std::size_t batch) {
    const std::size_t len = tgt_in.size() / batch;
    check_ids(tgt_in, batch);
    auto y = embed("embed.tgt", tgt_in, len);
    const BoolTensor self_mask = causal_mask(len);
    const BoolTensor cross_mask = padding_mask(src, batch, len);
    for (std::size_t i = 0; i < c_.n_layers; ++i) {
      const std::string p = "dec.L" + std::to_string(i);
      auto a = multi_head_attention(y, y, attn(p + ".self_attn"), batch, c_.n_heads, &self_mask, att_rate(), rng_);
      y = norm(p + ".norm1", add(y, dropout(a, res_rate(), rng_)));
      auto ca = multi_head_attention(y, memory, attn(p + ".cross_attn"), batch, c_.n_heads, &cross_mask, att_rate(),
                                     rng_);
      y = norm(p + ".norm2", add(y, dropout(ca, res_rate(), rng_)));
      y = norm(p + ".norm3", add(y, dropout(ffn(p + ".ffn", y), res_rate(), rng_)));
    }
    return y;
  }

  // Vocabulary logits for hidden rows.
  Var<T> project(Var<T> hidden) { return add_bias(matmul(hidden, param("proj.out.weight")), param("proj.out.bias")); }

  // Logits [batch * tgt_len, vocab].
  Var<T> forward(std::span<const std::int32_t> src, std::span<const std::int32_t> tgt_in, std::size_t batch) {
    auto memory = encode(src, batch);
    return project(decode_hidden(memory, src, tgt_in, batch));
  }

  Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto v = g_.param(name, w_.at(name));
    bound_.emplace(name, v);
    return v;
  }

 private:
  double res_rate() const { return rng_ ? c_.dropout : 0.0; }
  double att_rate() const { return rng_ ? c_.attention_dropout : 0.0; }
  double act_rate() const { return rng_ ? c_.activation_dropout : 0.0; }

  void check_ids(std::span<const std::int32_t> ids, std::size_t batch) const {
    if (batch == 0 || ids.empty() || ids.size() % batch != 0)
      throw DimensionError("token buffer of " + std::to_string(ids.size()) + " ids is not divisible into " +
                           std::to_string(batch) + " sequences");
    for (auto id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= c_.vocab_size)
        throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                         std::to_string(c_.vocab_size));
  }

  Var<T> embed(const std::string& table, std::span<const std::int32_t> ids, std::size_t len) {
    auto x = embedding(param(table), ids, static_cast<T>(std::sqrt(static_cast<double>(c_.d_model))));
    const std::size_t rows = ids.size();
    if (pe_.rows() < len || pe_.cols() != c_.d_model) pe_ = positional_encoding<T>(std::max(len, c_.max_len), c_.d_model);
    Tensor<T> tiled(Shape{rows, c_.d_model}, T{0});
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pe_.data().data() + (r % len) * c_.d_model, c_.d_model, tiled.data().data() + r * c_.d_model);
    return dropout(add(x, g_.constant(std::move(tiled))), res_rate(), rng_);
  }

  AttentionParams<T> attn(const std::string& p) {
    return {param(p + ".wq"), param(p + ".bq"), param(p + ".wk"), param(p + ".bk"),
            param(p + ".wv"), param(p + ".bv"), param(p + ".wo"), param(p + ".bo")};
  }

  Var<T> norm(const std::string& p, Var<T> x) { return layer_norm(x, param(p + ".gain"), param(p + ".bias")); }

  Var<T> ffn(const std::string& p, Var<T> x) {
    auto h = relu(add_bias(matmul(x, param(p + ".w1")), param(p + ".b1")));
    h = dropout(h, act_rate(), rng_);
    return add_bias(matmul(h, param(p + ".w2")), param(p + ".b2"));
  }

  Graph<T>& g_;
  const ModelWeights<T>& w_;
  TransformerConfig c_;
  Rng* rng_;
  Tensor<T> pe_;
  std::unordered_map<std::string, Var<T>> bound_;
};

/// Logits [batch, tgt_len, vocab] for a batch of token rows laid out
/// back-to-back. Dropout is applied only in train mode, driven by `seed`.
template <typename T>
Tensor<T> forward(const ModelWeights<T>& weights, const TransformerConfig& config, std::span<const std::int32_t> src,
                  std::span<const std::int32_t> tgt_in, std::size_t batch, bool train_mode = false,
                  std::uint64_t seed = 0) {
  Graph<T> g(false);
  Rng rng(seed);
  Seq2Seq<T> model(g, weights, config, train_mode ? &rng : nullptr);
  auto logits = model.forward(src, tgt_in, batch);
  return logits.value().reshaped(Shape{batch, tgt_in.size() / batch, config.vocab_size});
}

/// Greedy generation from START: appends the argmax token (lowest id on
/// ties) until END or max_len ids.
template <typename T>
TokenSequence greedy_decode(const ModelWeights<T>& weights, const TransformerConfig& config,
                            const TokenSequence& src) {
  Tensor<T> memory;
  {
    Graph<T> g(false);
    Seq2Seq<T> model(g, weights, config);
    memory = model.encode(src.ids, 1).value();
  }
  TokenSequence out;
  out.ids.push_back(kStart);
  while (out.ids.size() < config.max_len) {
    Graph<T> g(false);
    Seq2Seq<T> model(g, weights, config);
    auto hidden = model.decode_hidden(g.constant_ref(memory), src.ids, out.ids, 1);
    auto logits = model.project(slice_rows(hidden, out.ids.size() - 1, 1));
    const auto next = static_cast<std::int32_t>(kernels::argmax(logits.value().data().data(), config.vocab_size));
    out.ids.push_back(next);
    if (next == kEnd) break;
  }
  out.true_length = out.ids.size();
  out.ids.resize(config.max_len, kPad);
  return out;
}

}  // namespace fedbot
