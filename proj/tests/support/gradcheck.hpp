#pragma once

// Central finite-difference oracle. Independent of the backward rules: it
// only ever evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "fedbot/tensor.hpp"

namespace fedbot::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "name[index]" of the worst relative error
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so that entries whose true
// gradient is ~0 are judged on absolute error against the floor.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradCheckResult gradcheck(ModelWeights<double> weights, const Gradients<double>& analytic,
                                 const std::function<double(const ModelWeights<double>&)>& loss,
                                 double step = 1e-3, double floor = 1e-4) {
  GradCheckResult r;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    auto& tensor = weights[t].tensor;
    const auto& g = analytic.at(weights[t].name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      const double up = loss(weights);
      tensor[i] = saved - step;
      const double down = loss(weights);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double rel = relative_error(g[i], numeric, floor);
      r.max_abs_error = std::max(r.max_abs_error, std::abs(g[i] - numeric));
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = weights[t].name + "[" + std::to_string(i) + "] analytic=" + std::to_string(g[i]) +
                  " numeric=" + std::to_string(numeric);
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace fedbot::testing
