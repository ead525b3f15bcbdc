#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedbot/error.hpp"
#include "fedbot/kernels.hpp"
#include "fedbot/rng.hpp"
#include "fedbot/tensor.hpp"

namespace fedbot {

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted. One graph per training thread.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  // With recording off, parameters become constants and no backward rules
  // are kept (inference).
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  // References `value` without copying; it must outlive the graph.
  Var<T> constant_ref(const Tensor<T>& value) {
    Node n;
    n.external = &value;
    return push(std::move(n));
  }

  // Trainable leaf referencing `value`, which must outlive the graph.
  Var<T> param(std::string name, const Tensor<T>& value) {
    Node n;
    n.external = &value;
    return push_param(std::move(name), std::move(n));
  }

  // Trainable leaf owning its value.
  Var<T> param(std::string name, Tensor<T>&& value) {
    Node n;
    n.owned = std::move(value);
    return push_param(std::move(name), std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].val(); }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  // Appends an op node. The backward rule is dropped when no input needs a
  // gradient.
  Var<T> op(Tensor<T> value, std::vector<std::size_t> inputs, Backward backward) {
    Node n;
    n.owned = std::move(value);
    for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    if (n.requires_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    return push(std::move(n));
  }

  // Gradient buffer of node `id`, zero-initialized on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad.emplace(n.val().shape(), T{0});
    return *n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.has_value(); }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Backpropagates from a scalar loss. Returns one gradient per parameter,
  /// in registration order; parameters the loss does not depend on get zeros.
  Gradients<T> backward(Var<T> loss) {
    if (value(loss).size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_string(value(loss).shape()));
    for (auto& n : nodes_) n.grad.reset();
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, i);
    }
    Gradients<T> out;
    for (const auto& [name, id] : params_) {
      if (nodes_[id].grad)
        out.add(name, std::move(*nodes_[id].grad));
      else
        out.add(name, Tensor<T>(nodes_[id].val().shape(), T{0}));
    }
    return out;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Running hash of which relu inputs were positive, in evaluation order.
  // Two forward passes share it iff no relu input changed side.
  std::uint64_t relu_pattern() const noexcept { return relu_pattern_; }
  void note_relu(std::span<const T> x) noexcept {
    for (const T v : x) relu_pattern_ = (relu_pattern_ ^ (v > T{0} ? 0x9eu : 0x35u)) * 0x100000001b3ull;
  }

 private:
  std::uint64_t relu_pattern_ = 0xcbf29ce484222325ull;
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    std::optional<Tensor<T>> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;

    const Tensor<T>& val() const { return external ? *external : owned; }
  };

  Var<T> push_param(std::string name, Node n) {
    n.requires_grad = record_;
    Var<T> v = push(std::move(n));
    if (record_) params_.push_back({std::move(name), v.id});
    return v;
  }

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  bool record_;
  // deque: references to node values stay valid while the graph grows
  std::deque<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

namespace detail {

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor<T> out = a.value();
  detail::accumulate(out, b.value().data());
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    if (g.needs_grad(ia)) detail::accumulate(g.grad(ia), up.data());
    if (g.needs_grad(ib)) detail::accumulate(g.grad(ib), up.data());
  });
}

// x[..., n] + bias[n], broadcast over rows.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  if (bias.value().size() != n)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " +
                         shape_string(xv.shape()));
  Tensor<T> out = xv;
  const auto bv = bias.value().data();
  auto o = out.data();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] += bv[j];
  const std::size_t ix = x.id, ib = bias.id;
  return x.graph->op(std::move(out), {ix, ib}, [ix, ib, n](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    if (g.needs_grad(ix)) detail::accumulate(g.grad(ix), up.data());
    if (g.needs_grad(ib)) {
      auto gb = g.grad(ib).data();
      const auto u = up.data();
      for (std::size_t r = 0; r < up.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += u[r * n + j];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor<T> out = a.value();
  auto o = out.data();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    const Tensor<T>& av = g.value(Var<T>{&g, ia});
    const Tensor<T>& bv = g.value(Var<T>{&g, ib});
    if (g.needs_grad(ia)) {
      auto d = g.grad(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      auto d = g.grad(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {ia}, [ia, factor](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    auto d = g.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * up[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (auto v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return a.graph->op(Tensor<T>::scalar(s), {ia}, [ia](Graph<T>& g, std::size_t self) {
    const T up = g.grad(self)[0];
    for (auto& d : g.grad(ia).data()) d += up;
  });
}

// Gradient is defined as 0 at exactly x == 0.
template <typename T>
Var<T> relu(Var<T> a) {
  a.graph->note_relu(a.value().data());
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {ia}, [ia](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    const Tensor<T>& x = g.value(Var<T>{&g, ia});
    auto d = g.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > T{0}) d[i] += up[i];
  });
}

// Softmax over the last axis.
template <typename T>
Var<T> softmax(Var<T> a) {
  Tensor<T> out = a.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::softmax_row(out.data().data() + r * n, n);
  const std::size_t ia = a.id;
  return a.graph->op(std::move(out), {ia}, [ia, n](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    const Tensor<T>& y = g.value(Var<T>{&g, self});
    auto d = g.grad(ia).data();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += up[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (up[r * n + j] - dot);
    }
  });
}

// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are treated as rows.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.dim(1);
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape, T{0});
  kernels::matmul_acc<T>(av.data(), bv.data(), out.data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.graph->op(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    const Tensor<T>& av = g.value(Var<T>{&g, ia});
    const Tensor<T>& bv = g.value(Var<T>{&g, ib});
    if (g.needs_grad(ia)) kernels::matmul_bt_acc<T>(up.data(), bv.data(), g.grad(ia).data(), m, n, k);
    if (g.needs_grad(ib)) kernels::matmul_at_acc<T>(av.data(), up.data(), g.grad(ib).data(), m, k, n);
  });
}

// Normalizes the last axis to zero mean / unit variance, then applies gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-6)) {
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const auto& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + " vs input " +
                         shape_string(xv.shape()));
  Tensor<T> out(xv.shape(), T{0});
  std::vector<T> xhat(xv.size()), inv_std(rows);
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data().data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.graph->op(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g,
                                                                                   std::size_t self) {
        const Tensor<T>& up = g.grad(self);
        const Tensor<T>& gv = g.value(Var<T>{&g, ig});
        if (g.needs_grad(ig)) {
          auto dg = g.grad(ig).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += up[r * d + j] * xhat[r * d + j];
        }
        if (g.needs_grad(ib)) {
          auto db = g.grad(ib).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += up[r * d + j];
        }
        if (g.needs_grad(ix)) {
          auto dx = g.grad(ix).data();
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh{0}, mean_dh_h{0};
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = up[r * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              dx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity (the
/// same node is returned) when `rng` is null or the rate is zero.
template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = rng->uniform() < rate ? T{0} : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id;
  return x.graph->op(std::move(out), {ix}, [ix, mask = std::move(mask)](Graph<T>& g, std::size_t self) {
    const Tensor<T>& up = g.grad(self);
    auto d = g.grad(ix).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * mask[i];
  });
}

// Rows of `table` selected by `ids`, multiplied by `factor`: [ids.size(), d].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids, T factor) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding table must be 2-D");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Tensor<T> out(Shape{ids.size(), d}, T{0});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw IndexError("token id " + std::to_string(ids[r]) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    const T* src = tv.data().data() + static_cast<std::size_t>(ids[r]) * d;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = src[j] * factor;
  }
  const std::size_t it = table.id;
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return table.graph->op(std::move(out), {it},
                         [it, d, factor, idv = std::move(idv)](Graph<T>& g, std::size_t self) {
                           const Tensor<T>& up = g.grad(self);
                           auto dt = g.grad(it).data();
                           for (std::size_t r = 0; r < idv.size(); ++r) {
                             T* dst = dt.data() + static_cast<std::size_t>(idv[r]) * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += factor * up[r * d + j];
                           }
                         });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.graph->op(std::move(out), {ix}, [ix](Graph<T>& g, std::size_t self) {
    detail::accumulate(g.grad(ix), std::span<const T>(g.grad(self).data()));
  });
}

// Rows [start, start + count) of x viewed as [rows, cols].
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count) {
  const auto& xv = x.value();
  const std::size_t cols = xv.cols();
  if (count == 0 || start + count > xv.rows())
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_string(xv.shape()));
  std::vector<T> data(xv.data().begin() + static_cast<std::ptrdiff_t>(start * cols),
                      xv.data().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  const std::size_t ix = x.id;
  return x.graph->op(Tensor<T>(Shape{count, cols}, std::move(data)), {ix},
                     [ix, start, cols](Graph<T>& g, std::size_t self) {
                       const Tensor<T>& up = g.grad(self);
                       auto d = g.grad(ix).data();
                       for (std::size_t i = 0; i < up.size(); ++i) d[start * cols + i] += up[i];
                     });
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct CrossEntropy {
  Var<T> loss;
  std::size_t counted = 0;
  // Set when every position was masked; the loss is then defined as 0.
  bool all_masked = false;
};

/// Mean over unmasked positions of -log softmax(logits)[target]. `logits`
/// has the vocabulary on its last axis; `targets` and `mask` have one entry
/// per logits row.
template <typename T>
CrossEntropy<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets,
                              std::span<const std::uint8_t> mask) {
  const auto& lv = logits.value();
  const std::size_t vocab = lv.cols(), rows = lv.rows();
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  std::size_t counted = 0;
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
      throw IndexError("target id " + std::to_string(targets[r]) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    const T* row = lv.data().data() + r * vocab;
    total += kernels::log_sum_exp(row, vocab) - row[targets[r]];
    ++counted;
  }
  CrossEntropy<T> result;
  result.counted = counted;
  result.all_masked = counted == 0;
  const T loss_value = counted ? total / static_cast<T>(counted) : T{0};
  const std::size_t il = logits.id;
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  std::vector<std::uint8_t> mv(mask.begin(), mask.end());
  result.loss = logits.graph->op(
      Tensor<T>::scalar(loss_value), {il},
      [il, vocab, rows, counted, tv = std::move(tv), mv = std::move(mv)](Graph<T>& g, std::size_t self) {
        if (counted == 0) return;
        const T up = g.grad(self)[0] / static_cast<T>(counted);
        const Tensor<T>& lv = g.value(Var<T>{&g, il});
        auto d = g.grad(il).data();
        std::vector<T> p(vocab);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!mv[r]) continue;
          std::copy_n(lv.data().data() + r * vocab, vocab, p.data());
          kernels::softmax_row(p.data(), vocab);
          p[static_cast<std::size_t>(tv[r])] -= T{1};
          for (std::size_t j = 0; j < vocab; ++j) d[r * vocab + j] += up * p[j];
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention over `groups` independent blocks and `heads`
/// column slices. Row layout: q is [groups * n, heads * dk], k is
/// [groups * m, heads * dk], v is [groups * m, heads * dv]. `mask`, when
/// given, has shape [1 or groups, n, m]; false entries get a -inf score.
/// Rows with every key masked produce zeros.
template <typename T>
Var<T> attention_heads(Var<T> q, Var<T> k, Var<T> v, std::size_t groups, std::size_t heads,
                       const BoolTensor* mask, double dropout_rate = 0.0, Rng* rng = nullptr) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  auto dim_error = [&](const std::string& why) {
    return DimensionError("attention: " + why + " (q " + shape_string(qv.shape()) + ", k " +
                          shape_string(kv.shape()) + ", v " + shape_string(vv.shape()) + ")");
  };
  if (groups == 0 || heads == 0) throw dim_error("groups and heads must be positive");
  if (qv.rows() % groups || kv.rows() % groups || vv.rows() % groups)
    throw dim_error("row count not divisible by group count");
  if (qv.cols() != kv.cols()) throw dim_error("query and key widths differ");
  if (kv.rows() != vv.rows()) throw dim_error("key and value counts differ");
  if (qv.cols() % heads || vv.cols() % heads) throw dim_error("width not divisible by head count");
  const std::size_t n = qv.rows() / groups, m = kv.rows() / groups;
  const std::size_t dq = qv.cols(), dvw = vv.cols();
  const std::size_t dk = dq / heads, dv = dvw / heads;
  std::size_t mask_groups = 0;
  if (mask) {
    if (mask->shape.size() != 3 || mask->shape[1] != n || mask->shape[2] != m ||
        (mask->shape[0] != 1 && mask->shape[0] != groups))
      throw dim_error("mask shape " + shape_string(mask->shape) + " not broadcastable");
    mask_groups = mask->shape[0];
  }
  const bool use_dropout = rng != nullptr && dropout_rate > 0.0;
  const T keep_scale = use_dropout ? static_cast<T>(1.0 / (1.0 - dropout_rate)) : T{1};
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dk));

  // probs holds softmax weights; dropped holds the weights after dropout.
  std::vector<T> probs(groups * heads * n * m, T{0});
  std::vector<T> dropped;
  if (use_dropout) dropped.assign(probs.size(), T{0});
  std::vector<std::uint8_t> allowed(n * m, 1);
  Tensor<T> out(Shape{groups * n, dvw}, T{0});

  for (std::size_t gi = 0; gi < groups; ++gi) {
    if (mask) {
      const std::size_t mg = mask_groups == 1 ? 0 : gi;
      std::copy_n(mask->data.begin() + static_cast<std::ptrdiff_t>(mg * n * m), n * m, allowed.begin());
    }
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (gi * heads + h) * n * m;
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = qv.data().data() + (gi * n + i) * dq + h * dk;
        T* prow = P + i * m;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < m; ++j) {
          if (!allowed[i * m + j]) continue;
          const T* kj = kv.data().data() + (gi * m + j) * dq + h * dk;
          T s{0};
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          prow[j] = s * inv_sqrt;
          mx = std::max(mx, prow[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T total{0};
        for (std::size_t j = 0; j < m; ++j) {
          if (!allowed[i * m + j]) continue;
          prow[j] = std::exp(prow[j] - mx);
          total += prow[j];
        }
        for (std::size_t j = 0; j < m; ++j) prow[j] = allowed[i * m + j] ? prow[j] / total : T{0};
        const T* wrow = prow;
        if (use_dropout) {
          T* drow = dropped.data() + (gi * heads + h) * n * m + i * m;
          for (std::size_t j = 0; j < m; ++j)
            drow[j] = rng->uniform() < dropout_rate ? T{0} : prow[j] * keep_scale;
          wrow = drow;
        }
        T* orow = out.data().data() + (gi * n + i) * dvw + h * dv;
        for (std::size_t j = 0; j < m; ++j) {
          if (wrow[j] == T{0}) continue;
          const T* vj = vv.data().data() + (gi * m + j) * dvw + h * dv;
          for (std::size_t c = 0; c < dv; ++c) orow[c] += wrow[j] * vj[c];
        }
      }
    }
  }

  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.graph->op(
      std::move(out), {iq, ik, iv},
      [=, probs = std::move(probs), dropped = std::move(dropped)](Graph<T>& g, std::size_t self) {
        const Tensor<T>& up = g.grad(self);
        const Tensor<T>& qv = g.value(Var<T>{&g, iq});
        const Tensor<T>& kv = g.value(Var<T>{&g, ik});
        const Tensor<T>& vv = g.value(Var<T>{&g, iv});
        const bool gq = g.needs_grad(iq), gk = g.needs_grad(ik), gv = g.needs_grad(iv);
        T* dq_buf = gq ? g.grad(iq).data().data() : nullptr;
        T* dk_buf = gk ? g.grad(ik).data().data() : nullptr;
        T* dv_buf = gv ? g.grad(iv).data().data() : nullptr;
        std::vector<T> dw(m), ds(m);
        for (std::size_t gi = 0; gi < groups; ++gi) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* P = probs.data() + (gi * heads + h) * n * m;
            const T* W = use_dropout ? dropped.data() + (gi * heads + h) * n * m : P;
            for (std::size_t i = 0; i < n; ++i) {
              const T* prow = P + i * m;
              const T* wrow = W + i * m;
              const T* uo = up.data().data() + (gi * n + i) * dvw + h * dv;
              // d(weights) and d(values)
              for (std::size_t j = 0; j < m; ++j) {
                const T* vj = vv.data().data() + (gi * m + j) * dvw + h * dv;
                T s{0};
                for (std::size_t c = 0; c < dv; ++c) s += uo[c] * vj[c];
                dw[j] = s;
                if (gv && wrow[j] != T{0}) {
                  T* dvj = dv_buf + (gi * m + j) * dvw + h * dv;
                  for (std::size_t c = 0; c < dv; ++c) dvj[c] += wrow[j] * uo[c];
                }
              }
              // through dropout: d(probs) = d(dropped) * mask_scale
              if (use_dropout)
                for (std::size_t j = 0; j < m; ++j)
                  dw[j] = prow[j] != T{0} ? dw[j] * (wrow[j] / prow[j]) : T{0};
              T dot{0};
              for (std::size_t j = 0; j < m; ++j) dot += prow[j] * dw[j];
              for (std::size_t j = 0; j < m; ++j) ds[j] = prow[j] * (dw[j] - dot) * inv_sqrt;
              const T* qi = qv.data().data() + (gi * n + i) * dq + h * dk;
              T* dqi = gq ? dq_buf + (gi * n + i) * dq + h * dk : nullptr;
              for (std::size_t j = 0; j < m; ++j) {
                if (ds[j] == T{0}) continue;
                const T* kj = kv.data().data() + (gi * m + j) * dq + h * dk;
                if (gq)
                  for (std::size_t c = 0; c < dk; ++c) dqi[c] += ds[j] * kj[c];
                if (gk) {
                  T* dkj = dk_buf + (gi * m + j) * dq + h * dk;
                  for (std::size_t c = 0; c < dk; ++c) dkj[c] += ds[j] * qi[c];
                }
              }
            }
          }
        }
      });
}

/// softmax(Q K^T / sqrt(d_k)) V for tensors of shape [..., n, d_k],
/// [..., m, d_k], [..., m, d_v]; leading axes must agree. The result has
/// shape [..., n, d_v].
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const BoolTensor* mask = nullptr) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const Shape& vs = v.shape();
  if (qs.size() < 2 || ks.size() != qs.size() || vs.size() != qs.size() ||
      !std::equal(qs.begin(), qs.end() - 2, ks.begin()) ||
      !std::equal(qs.begin(), qs.end() - 2, vs.begin()))
    throw DimensionError("attention: incompatible shapes q " + shape_string(qs) + ", k " +
                         shape_string(ks) + ", v " + shape_string(vs));
  std::size_t groups = 1;
  for (std::size_t i = 0; i + 2 < qs.size(); ++i) groups *= qs[i];
  Var<T> out = attention_heads(q, k, v, groups, 1, mask);
  Shape out_shape = qs;
  out_shape.back() = vs.back();
  return reshape(out, out_shape);
}


}  // namespace fedbot
