// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/data.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace attrprompt {

using ad::Matrix;

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kDefaultTemperature = 0.01;

struct AlignmentOutput {
  std::vector<double> similarities;  // cosine(f_v[j], f_t[j])
  std::vector<double> y_hat_vt;      // sigmoid(similarity / tau)
  double tau = kDefaultTemperature;
};

/// Row-paired cosine alignment. Throws on mismatched shapes, a zero-norm row
/// (naming the attribute) or tau <= 0.
AlignmentOutput aligned_similarity(const Matrix& f_v, const Matrix& f_t, double tau);

/// Weighted binary cross-entropy on logits for one sample, summed over
/// attributes and negated so that lower is better. Probabilities are clamped
/// to [1e-7, 1 - 1e-7] before the log.
double prediction_loss(std::span<const double> logits, std::span<const std::uint8_t> labels,
                       const ImbalanceWeights& weights);
/// Batch form: mean over rows of the per-sample loss. `logits` is N x A.
double prediction_loss(const Matrix& logits, const std::vector<std::vector<std::uint8_t>>& labels,
                       const ImbalanceWeights& weights);

/// Unweighted BCE between alignment probabilities and labels, same clamping.
double alignment_loss(std::span<const double> y_hat_vt, std::span<const std::uint8_t> labels);
double alignment_loss(const Matrix& y_hat_vt, const std::vector<std::vector<std::uint8_t>>& labels);

struct LossPhase {
  int start_epoch = 0;
  double alpha = 1.0;  // prediction-loss coefficient
  double beta = 0.0;   // alignment-loss coefficient
  bool operator==(const LossPhase&) const = default;
};

/// Epoch-indexed (alpha, beta). Phase i covers [start_i, start_{i+1}); the
/// last phase runs to `end_epoch` (exclusive) or forever when unset.
class LossSchedule {
 public:
  LossSchedule() : LossSchedule(standard()) {}
  explicit LossSchedule(std::vector<LossPhase> phases, std::optional<int> end_epoch = std::nullopt);

  /// 0-9: (1, 0); 10-19: (0, 1); 20+: (1, 0.5).
  static LossSchedule standard(std::optional<int> end_epoch = std::nullopt);
  static LossSchedule constant(double alpha, double beta, std::optional<int> end_epoch = std::nullopt);

  std::pair<double, double> coefficients(int epoch) const;
  const std::vector<LossPhase>& phases() const { return phases_; }
  std::optional<int> end_epoch() const { return end_epoch_; }
  LossSchedule with_end(int end_epoch) const { return LossSchedule(phases_, end_epoch); }

 private:
  std::vector<LossPhase> phases_;
  std::optional<int> end_epoch_;
};

std::pair<double, double> loss_coefficients(int epoch, const LossSchedule& schedule);
double combined_loss(int epoch, double l_pred, double l_align, const LossSchedule& schedule);

/// Graph forms used by training.
///
/// `logits` is A x 1 for one sample.
ad::Var prediction_loss_graph(const ad::Var& logits, std::span<const std::uint8_t> labels,
                              const ImbalanceWeights& weights);
/// Row cosine between f_v and f_t, scaled by `inv_tau` (1x1), BCE against
/// labels. `weights` empty means unweighted.
ad::Var alignment_loss_graph(const ad::Var& f_v, const ad::Var& f_t, const ad::Var& inv_tau,
                             std::span<const std::uint8_t> labels, const ImbalanceWeights* weights = nullptr);
/// Per-attribute alignment logits cos/tau as an A x 1 variable.
ad::Var alignment_logits(const ad::Var& f_v, const ad::Var& f_t, const ad::Var& inv_tau);

}  // namespace attrprompt
