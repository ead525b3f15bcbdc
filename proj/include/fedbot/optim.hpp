#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>

#include "fedbot/error.hpp"
#include "fedbot/tensor.hpp"

namespace fedbot {

namespace detail {

template <typename T>
const Tensor<T>& matching_grad(const ModelWeights<T>& weights, const Gradients<T>& grads,
                               std::size_t i) {
  const auto& name = weights[i].name;
  if (!grads.contains(name)) throw ContractError("missing gradient for weight '" + name + "'");
  const auto& g = grads.at(name);
  if (g.shape() != weights[i].tensor.shape())
    throw DimensionError("gradient for '" + name + "' has shape " + shape_string(g.shape()) +
                         ", weight has " + shape_string(weights[i].tensor.shape()));
  return g;
}

}  // namespace detail

/// w <- w - lr * g for every tensor, in place.
template <typename T>
void sgd_step(ModelWeights<T>& weights, const Gradients<T>& grads, T lr) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& g = detail::matching_grad(weights, grads, i);
    if (lr == T{0}) continue;
    auto w = weights[i].tensor.data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
  }
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  ModelWeights<T> first_moment;
  ModelWeights<T> second_moment;
};

/// Bias-corrected Adam update, in place. An empty state is initialized to
/// zero moments on the first call.
template <typename T>
void adam_step(AdamState<T>& state, ModelWeights<T>& weights, const Gradients<T>& grads, T lr,
               const AdamOptions& opt = {}) {
  if (state.first_moment.empty()) {
    for (const auto& e : weights) {
      state.first_moment.add(e.name, Tensor<T>(e.tensor.shape(), T{0}));
      state.second_moment.add(e.name, Tensor<T>(e.tensor.shape(), T{0}));
    }
  } else if (!state.first_moment.same_layout(weights)) {
    throw ContractError("adam state does not match the weight layout");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& g = detail::matching_grad(weights, grads, i);
    auto w = weights[i].tensor.data();
    auto m = state.first_moment[i].tensor.data();
    auto v = state.second_moment[i].tensor.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      w[j] -= static_cast<T>(static_cast<double>(lr) * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

/// Warm-up then inverse-square-root decay of the standard transformer
/// recipe: d_model^-0.5 * min(step^-0.5, step * warmup^-1.5). `step` >= 1.
inline double transformer_lr(std::uint64_t step, std::size_t d_model, std::uint64_t warmup_steps) {
  const double s = static_cast<double>(std::max<std::uint64_t>(step, 1));
  const double w = static_cast<double>(std::max<std::uint64_t>(warmup_steps, 1));
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

}  // namespace fedbot
