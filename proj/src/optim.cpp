// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace attrprompt {

void AdamW::step(ParameterStore& store, double lr) {
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  for (auto& [name, p] : store) {
    if (!p.trainable || !p.touched) continue;
    auto& s = state_[name];
    if (s.m.size() == 0) {
      s.m = Matrix::Zero(p.value.rows(), p.value.cols());
      s.v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    ++s.step;
    s.m = b1 * s.m + (1.0 - b1) * p.grad;
    s.v = b2 * s.v + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.step));
    p.value *= 1.0 - lr * config_.weight_decay;
    p.value.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + config_.eps);
  }
}

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total steps must be > 0");
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : store) {
    if (p.trainable && p.touched) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& [_, p] : store) {
      if (p.trainable && p.touched) p.grad *= s;
    }
  }
  return norm;
}

}  // namespace attrprompt
