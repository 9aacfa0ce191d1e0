// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "netpretrain/autodiff/tensor.hpp"

namespace netpretrain {

struct AdamWConfig {
  double lr = 1e-5;  // peak
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double warmup_fraction = 0.1;
};

/// Linear warm-up to the peak over the first warmup_fraction of steps, then
/// linear decay to zero at total_steps. `step` is 1-based.
inline double scheduled_lr(const AdamWConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return cfg.lr;
  const double warmup = std::floor(cfg.warmup_fraction * static_cast<double>(total_steps));
  const double s = static_cast<double>(step);
  if (warmup > 0 && s <= warmup) return cfg.lr * s / warmup;
  const double remaining = static_cast<double>(total_steps) - warmup;
  if (remaining <= 0) return cfg.lr;
  return cfg.lr * std::max(0.0, (static_cast<double>(total_steps) - s) / remaining);
}

/// First and second moments per parameter plus the update count.
template <class T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  template <class Params>
  static AdamState zeros_like(const Params& params) {
    AdamState s;
    for (const auto& [name, t] : params) {
      s.m.emplace_back(t.size(), T(0));
      s.v.emplace_back(t.size(), T(0));
    }
    return s;
  }
};

/// Global L2 norm over all gradients, accumulated in double.
template <class Params>
double global_grad_norm(Params& params) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    auto tt = t;
    for (auto g : tt.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// Decoupled-weight-decay Adam with bias correction. Gradients are first
/// clipped to a global norm of cfg.clip_norm. Weight decay applies to
/// parameters of rank >= 2 only. Throws without touching any parameter when a
/// gradient is non-finite. Gradients are zeroed afterwards. Returns the
/// pre-clip gradient norm.
template <class T, class Params>
double adamw_update(Params& params, AdamState<T>& state, double lr, const AdamWConfig& cfg) {
  if (state.m.size() != params.size()) throw Error("adamw_update: optimizer state does not match parameters");
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    if (state.m[i].size() != t.size() || state.v[i].size() != t.size()) {
      throw Error("adamw_update: optimizer state shape mismatch for " + name);
    }
    ++i;
  }
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NonFiniteError("adamw_update: non-finite gradient, update skipped");
  const double clip = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  i = 0;
  for (auto& [name, t] : params) {
    auto tt = t;
    auto g = tt.grad();
    auto w = tt.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool decay = tt.dim() >= 2 && cfg.weight_decay > 0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]) * clip;
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double wj = static_cast<double>(w[j]);
      if (decay) wj -= lr * cfg.weight_decay * wj;
      wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      w[j] = static_cast<T>(wj);
    }
    tt.zero_grad();
    ++i;
  }
  return norm;
}

}  // namespace netpretrain
