#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "bikd/error.hpp"
#include "bikd/nn.hpp"

namespace bikd {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Stepped learning rate: multiplied by `factor` at each decay epoch
// (0-based; the decayed rate applies from that epoch onward).
struct LrSchedule {
  double base = 0.1;
  std::vector<std::size_t> decay_epochs = {80, 100};
  double factor = 0.1;

  double at_epoch(std::size_t epoch) const {
    double lr = base;
    for (std::size_t m : decay_epochs)
      if (epoch >= m) lr *= factor;
    return lr;
  }
};

// SGD with momentum and decoupled-into-gradient weight decay:
//   g <- grad + wd * p;  buf <- mu * buf + g;  p <- p - lr * buf.
template <class T>
void sgd_step(ModelState<T>& state, const std::vector<std::vector<T>>& grads,
              SgdMomentumState<T>& slots, const SgdConfig& cfg) {
  if (grads.size() != state.params.size())
    throw ContractError("sgd_step: gradient count does not match parameters");
  if (slots.buffers.empty()) {
    slots.buffers.resize(state.params.size());
    for (std::size_t i = 0; i < state.params.size(); ++i)
      slots.buffers[i].assign(state.params[i].numel(), T(0));
  }
  const T lr = static_cast<T>(cfg.lr);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i].value;
    auto& buf = slots.buffers[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g[j] + wd * p[j];
      buf[j] = mu * buf[j] + gj;
      p[j] -= lr * buf[j];
    }
  }
}

// Plain gradient step, no momentum, no weight decay.
template <class T>
void plain_sgd_step(ModelState<T>& state, const std::vector<std::vector<T>>& grads,
                    T lr) {
  if (grads.size() != state.params.size())
    throw ContractError("plain_sgd_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i].value;
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
  }
}

// Adam with bias correction; eps added outside the square root.
template <class T>
void adam_step(ModelState<T>& state, const std::vector<std::vector<T>>& grads,
               AdamState<T>& slots, const AdamConfig& cfg) {
  if (grads.size() != state.params.size())
    throw ContractError("adam_step: gradient count does not match parameters");
  if (slots.m.empty()) {
    slots.m.resize(state.params.size());
    slots.v.resize(state.params.size());
    for (std::size_t i = 0; i < state.params.size(); ++i) {
      slots.m[i].assign(state.params[i].numel(), T(0));
      slots.v[i].assign(state.params[i].numel(), T(0));
    }
  }
  slots.step += 1;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T corr1 = T(1) - std::pow(b1, static_cast<T>(slots.step));
  const T corr2 = T(1) - std::pow(b2, static_cast<T>(slots.step));
  const T lr = static_cast<T>(cfg.lr);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    auto& p = state.params[i].value;
    auto& m = slots.m[i];
    auto& v = slots.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / corr1;
      const T vhat = v[j] / corr2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace bikd
