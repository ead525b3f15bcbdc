#pragma once

// Batching, loss/gradient evaluation and teacher-forced scoring shared by
// client nodes and the centralized baseline.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedbot/autograd.hpp"
#include "fedbot/kernels.hpp"
#include "fedbot/tokenizer.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {

/// One training pair as fixed-length token rows (START ... END PAD ...).
struct Example {
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> tgt;

  bool operator==(const Example&) const = default;
};

inline Example make_example(const Vocabulary& vocab, std::string_view query, std::string_view response,
                            std::size_t max_len) {
  return Example{encode(vocab, query, max_len).ids, encode(vocab, response, max_len).ids};
}

/// Rows laid out back-to-back. The decoder reads `tgt_in` and is scored
/// against `tgt_out` (tgt_in shifted left by one, PAD-filled); `mask` flags
/// the non-PAD targets.
struct Batch {
  std::size_t size = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> tgt_in;
  std::vector<std::int32_t> tgt_out;
  std::vector<std::uint8_t> mask;
};

inline Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices) {
  Batch b;
  if (indices.empty()) throw ContractError("cannot build an empty batch");
  b.size = indices.size();
  b.len = examples[indices[0]].tgt.size();
  for (auto i : indices) {
    const auto& ex = examples[i];
    if (ex.tgt.size() != b.len || ex.src.size() != examples[indices[0]].src.size())
      throw DimensionError("examples in one batch must share their lengths");
    b.src.insert(b.src.end(), ex.src.begin(), ex.src.end());
    b.tgt_in.insert(b.tgt_in.end(), ex.tgt.begin(), ex.tgt.end());
    for (std::size_t p = 0; p < b.len; ++p) {
      const std::int32_t next = p + 1 < b.len ? ex.tgt[p + 1] : kPad;
      b.tgt_out.push_back(next);
      b.mask.push_back(next != kPad ? 1 : 0);
    }
  }
  return b;
}

inline Batch make_batch(std::span<const Example> examples) {
  std::vector<std::size_t> all(examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(examples, all);
}

// Number of masked-in rows whose argmax (lowest id on ties) equals the target.
template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> mask) {
  const std::size_t vocab = logits.cols();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r)
    if (mask[r] && static_cast<std::int32_t>(kernels::argmax(logits.data().data() + r * vocab, vocab)) == targets[r])
      ++correct;
  return correct;
}

template <typename T>
struct StepResult {
  double loss = 0.0;
  std::size_t counted = 0;
  std::size_t correct = 0;
  bool all_masked = false;
  Gradients<T> grads;
};

/// Masked cross-entropy of one batch and its gradient for every weight.
/// Dropout is active iff `dropout_rng` is non-null.
template <typename T>
StepResult<T> loss_and_grad(const ModelWeights<T>& weights, const TransformerConfig& config, const Batch& batch,
                            Rng* dropout_rng = nullptr) {
  Graph<T> g;
  Seq2Seq<T> model(g, weights, config, dropout_rng);
  for (const auto& e : weights) model.param(e.name);  // register in canonical order
  auto logits = model.forward(batch.src, batch.tgt_in, batch.size);
  auto ce = cross_entropy(logits, batch.tgt_out, batch.mask);
  StepResult<T> r;
  r.loss = static_cast<double>(ce.loss.value()[0]);
  r.counted = ce.counted;
  r.all_masked = ce.all_masked;
  r.correct = count_correct(logits.value(), batch.tgt_out, batch.mask);
  r.grads = g.backward(ce.loss);
  return r;
}

struct EvalResult {
  double accuracy = 0.0;  // percent of non-PAD target tokens predicted exactly
  double loss = 0.0;      // mean masked cross-entropy per target token
  std::size_t tokens = 0;
};

/// Teacher-forced token accuracy and loss, dropout off.
template <typename T>
EvalResult evaluate(const ModelWeights<T>& weights, const TransformerConfig& config, std::span<const Example> data,
                    std::size_t batch_size = 32) {
  if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  double loss_sum = 0.0;
  std::size_t correct = 0, tokens = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const auto batch = make_batch(data.subspan(start, n));
    Graph<T> g(false);
    Seq2Seq<T> model(g, weights, config);
    auto logits = model.forward(batch.src, batch.tgt_in, batch.size);
    auto ce = cross_entropy(logits, batch.tgt_out, batch.mask);
    loss_sum += static_cast<double>(ce.loss.value()[0]) * static_cast<double>(ce.counted);
    tokens += ce.counted;
    correct += count_correct(logits.value(), batch.tgt_out, batch.mask);
  }
  EvalResult r;
  r.tokens = tokens;
  if (tokens > 0) {
    r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(tokens);
    r.loss = loss_sum / static_cast<double>(tokens);
  }
  return r;
}

}  // namespace fedbot
