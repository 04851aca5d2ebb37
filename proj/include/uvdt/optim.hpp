// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "uvdt/tensor.hpp"

#include <cstdint>
#include <vector>

namespace uvdt {

struct ScheduleError : Error {
  explicit ScheduleError(const std::string& msg) : Error(msg) {}
};

// Linear warmup to the configured lr over warmup_fraction of total_steps,
// then linear decay to 0 at step == total_steps. Steps are 1-based.
inline double effective_lr(double lr, double warmup_fraction, int64_t total_steps, int64_t step) {
  if (step < 1 || step > total_steps)
    throw ScheduleError("lr schedule: step " + std::to_string(step) + " outside [1," +
                        std::to_string(total_steps) + "]");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
    throw ScheduleError("lr schedule: warmup_fraction must be in [0,1)");
  const int64_t warmup = static_cast<int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step <= warmup)
    return lr * static_cast<double>(step) / static_cast<double>(warmup);
  return lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.1;
  int64_t total_steps = 1;
};

struct AdamState {
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;

  static AdamState init(const std::vector<Tensor>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& p : params) {
      s.m.emplace_back(p.values().size(), real(0));
      s.v.emplace_back(p.values().size(), real(0));
    }
    return s;
  }
};

// One Adam update using each parameter's accumulated grad; bias-corrected
// moments, scheduled learning rate. Grads are left untouched (callers zero
// them between batches).
inline void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg,
                      int64_t step) {
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state does not match parameter list");
  const double lr_t = effective_lr(cfg.lr, cfg.warmup_fraction, cfg.total_steps, step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].values();
    auto& g = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size())
      throw ShapeError("adam_step: state shape mismatch at parameter " + std::to_string(k));
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<real>(mi);
      v[i] = static_cast<real>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] -= static_cast<real>(lr_t * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace uvdt
