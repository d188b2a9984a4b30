#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "i2v/graph.hpp"
#include "i2v/tensor.hpp"

namespace i2v {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalar loss with central differences.
// `build` must construct the loss on the given graph from the current
// parameter values, deterministically. Relative error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, floor). Deep models
// need a larger floor: zero-gradient coordinates still pick up ~1e-10 of
// finite-difference noise.
inline GradCheckResult grad_check(const std::function<Var(Graph&)>& build, ParamStore& params,
                                  double h = 1e-5, double floor = 1e-8) {
  params.zero_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g(false);
    return build(g).value().item();
  };

  GradCheckResult result;
  for (auto& p : params) {
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double saved = p.value[j];
      p.value[j] = saved + h;
      const double up = eval();
      p.value[j] = saved - h;
      const double down = eval();
      p.value[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad[j];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p.name;
        result.worst_index = j;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace i2v
