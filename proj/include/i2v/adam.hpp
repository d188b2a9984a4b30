#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "i2v/tensor.hpp"

namespace i2v {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled: applied as p -= lr * weight_decay * p alongside the Adam step.
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParamStore& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.value.shape(), 0.0);
      s.v.emplace_back(p.value.shape(), 0.0);
    }
    return s;
  }
};

// One Adam update with bias correction using the gradients held in `params`.
inline void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty() && state.v.empty()) state = AdamState::for_params(params);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state does not match parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (state.m[i].shape() != p.value.shape() || state.v[i].shape() != p.value.shape() ||
        p.grad.shape() != p.value.shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + p.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.value[j] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value[j]);
    }
  }
}

}  // namespace i2v
