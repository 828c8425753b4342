// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "sdbev/model.hpp"
#include "sdbev/tensor.hpp"

namespace sdbev {

struct OptimizerConfig {
  double lr = 2e-4;
  double weight_decay = 1e-2;
  std::string schedule = "cosine";  // "cosine" or "constant"
  double grad_clip = 10.0;          // global norm; <= 0 disables

  void validate() const {
    if (lr <= 0.0 || weight_decay < 0.0) throw std::invalid_argument("optimizer: bad lr/decay");
    if (schedule != "cosine" && schedule != "constant")
      throw std::invalid_argument("optimizer: unknown schedule " + schedule);
  }
};

/// Cosine annealing from base to 0 across total steps.
inline double cosine_lr(double base, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base;
  const double t = std::min<double>(1.0, static_cast<double>(step) / total_steps);
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

inline double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step,
                           std::int64_t total_steps) {
  return cfg.schedule == "cosine" ? cosine_lr(cfg.lr, step, total_steps) : cfg.lr;
}

/// AdamW with decoupled weight decay. Moment buffers are keyed like params;
/// step order follows the ordered parameter map so updates are deterministic.
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) { cfg.validate(); }

  void step(ModelState& state, const std::map<std::string, Tensor>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    double scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : grads)
        for (double e : g.v) sq += e * e;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
    }
    for (auto& [name, p] : state.params) {
      const auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = git->second;
      Tensor& m = moment(m_, name, p);
      Tensor& v = moment(v_, name, p);
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gi = g.v[i] * scale;
        m.v[i] = beta1_ * m.v[i] + (1.0 - beta1_) * gi;
        v.v[i] = beta2_ * v.v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m.v[i] / bc1;
        const double vhat = v.v[i] / bc2;
        p.v[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + cfg_.weight_decay * p.v[i]);
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  static Tensor& moment(std::map<std::string, Tensor>& store, const std::string& name,
                        const Tensor& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor::zeros(like.shape)).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  std::map<std::string, Tensor> m_, v_;
  std::int64_t t_ = 0;
  static constexpr double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

}  // namespace sdbev
