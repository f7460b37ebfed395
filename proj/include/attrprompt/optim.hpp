// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/parameters.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace attrprompt {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct MomentState {
  Matrix m;
  Matrix v;
  std::int64_t step = 0;
};

/// Adam with decoupled weight decay. Only trainable parameters that received
/// a gradient since their last `zero_grad` are updated; each keeps its own
/// step count for bias correction.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(ParameterStore& store, double lr);

  const AdamWConfig& config() const { return config_; }
  const std::map<std::string, MomentState>& state() const { return state_; }
  std::map<std::string, MomentState>& state() { return state_; }

 private:
  AdamWConfig config_;
  std::map<std::string, MomentState> state_;
};

/// base * (1 + cos(pi * step / total)) / 2, annealing to 0 at `total`.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

/// Rescales gradients of trainable, touched parameters so their global L2
/// norm is at most `max_norm`. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

}  // namespace attrprompt
