// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace attrprompt {

namespace {

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_labels(std::span<const std::uint8_t> labels) {
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] > 1) {
      throw std::invalid_argument("label " + std::to_string(labels[j]) + " at attribute " + std::to_string(j) +
                                  " is not 0 or 1");
    }
  }
}

double bce(double p, std::uint8_t y) {
  const double q = clamp_probability(p);
  return -(y ? std::log(q) : std::log(1.0 - q));
}

}  // namespace

AlignmentOutput aligned_similarity(const Matrix& f_v, const Matrix& f_t, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature tau must be > 0");
  if (f_v.rows() != f_t.rows() || f_v.cols() != f_t.cols()) {
    throw std::invalid_argument("aligned_similarity: f_v and f_t shapes differ");
  }
  AlignmentOutput out;
  out.tau = tau;
  for (Eigen::Index j = 0; j < f_v.rows(); ++j) {
    const double nv = f_v.row(j).norm();
    const double nt = f_t.row(j).norm();
    if (nv == 0.0 || nt == 0.0) {
      throw std::invalid_argument("aligned_similarity: zero-norm " + std::string(nv == 0.0 ? "f_v" : "f_t") +
                                  " row for attribute " + std::to_string(j));
    }
    const double s = f_v.row(j).dot(f_t.row(j)) / (nv * nt);
    out.similarities.push_back(std::clamp(s, -1.0, 1.0));
    out.y_hat_vt.push_back(sigmoid(out.similarities.back() / tau));
  }
  return out;
}

double prediction_loss(std::span<const double> logits, std::span<const std::uint8_t> labels,
                       const ImbalanceWeights& weights) {
  if (logits.size() != labels.size() || weights.size() != labels.size()) {
    throw std::invalid_argument("prediction_loss: logits, labels and weights must have length A");
  }
  check_labels(labels);
  double total = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) total += weights.weight(j, labels[j]) * bce(sigmoid(logits[j]), labels[j]);
  return total;
}

double prediction_loss(const Matrix& logits, const std::vector<std::vector<std::uint8_t>>& labels,
                       const ImbalanceWeights& weights) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size() || labels.empty()) {
    throw std::invalid_argument("prediction_loss: batch size mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::RowVectorXd row = logits.row(i);
    total += prediction_loss(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                             labels[static_cast<std::size_t>(i)], weights);
  }
  return total / static_cast<double>(logits.rows());
}

double alignment_loss(std::span<const double> y_hat_vt, std::span<const std::uint8_t> labels) {
  if (y_hat_vt.size() != labels.size()) throw std::invalid_argument("alignment_loss: length mismatch");
  check_labels(labels);
  double total = 0.0;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (!(y_hat_vt[j] >= 0.0 && y_hat_vt[j] <= 1.0)) {
      throw std::invalid_argument("alignment_loss: probability outside [0, 1] at attribute " + std::to_string(j));
    }
    total += bce(y_hat_vt[j], labels[j]);
  }
  return total;
}

double alignment_loss(const Matrix& y_hat_vt, const std::vector<std::vector<std::uint8_t>>& labels) {
  if (static_cast<std::size_t>(y_hat_vt.rows()) != labels.size() || labels.empty()) {
    throw std::invalid_argument("alignment_loss: batch size mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < y_hat_vt.rows(); ++i) {
    const Eigen::RowVectorXd row = y_hat_vt.row(i);
    total += alignment_loss(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                            labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(y_hat_vt.rows());
}

LossSchedule::LossSchedule(std::vector<LossPhase> phases, std::optional<int> end_epoch)
    : phases_(std::move(phases)), end_epoch_(end_epoch) {
  if (phases_.empty()) throw std::invalid_argument("loss schedule needs at least one phase");
  if (phases_.front().start_epoch != 0) throw std::invalid_argument("loss schedule must start at epoch 0");
  for (std::size_t i = 0; i < phases_.size(); ++i) {
    const auto& p = phases_[i];
    if (!(p.alpha >= 0.0) || !(p.beta >= 0.0)) throw std::invalid_argument("loss coefficients must be >= 0");
    if (i > 0 && p.start_epoch <= phases_[i - 1].start_epoch) {
      throw std::invalid_argument("loss schedule phases must have strictly increasing start epochs");
    }
  }
  if (end_epoch_ && *end_epoch_ < 0) throw std::invalid_argument("loss schedule end epoch must be >= 0");
}

LossSchedule LossSchedule::standard(std::optional<int> end_epoch) {
  return LossSchedule({{0, 1.0, 0.0}, {10, 0.0, 1.0}, {20, 1.0, 0.5}}, end_epoch);
}

LossSchedule LossSchedule::constant(double alpha, double beta, std::optional<int> end_epoch) {
  return LossSchedule({{0, alpha, beta}}, end_epoch);
}

std::pair<double, double> LossSchedule::coefficients(int epoch) const {
  if (epoch < 0 || (end_epoch_ && epoch >= *end_epoch_)) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " is outside the loss schedule");
  }
  const LossPhase* hit = &phases_.front();
  for (const auto& p : phases_) {
    if (p.start_epoch <= epoch) hit = &p;
  }
  return {hit->alpha, hit->beta};
}

std::pair<double, double> loss_coefficients(int epoch, const LossSchedule& schedule) {
  return schedule.coefficients(epoch);
}

double combined_loss(int epoch, double l_pred, double l_align, const LossSchedule& schedule) {
  const auto [alpha, beta] = schedule.coefficients(epoch);
  return alpha * l_pred + beta * l_align;
}

ad::Var prediction_loss_graph(const ad::Var& logits, std::span<const std::uint8_t> labels,
                              const ImbalanceWeights& weights) {
  const auto a = static_cast<Eigen::Index>(labels.size());
  if (logits.rows() != a || logits.cols() != 1 || weights.size() != labels.size()) {
    throw std::invalid_argument("prediction_loss: logits, labels and weights must have length A");
  }
  check_labels(labels);
  Matrix y(a, 1);
  Matrix w(a, 1);
  for (Eigen::Index j = 0; j < a; ++j) {
    y(j, 0) = labels[static_cast<std::size_t>(j)];
    w(j, 0) = weights.weight(static_cast<std::size_t>(j), labels[static_cast<std::size_t>(j)]);
  }
  return ad::bce_with_logits(logits, y, w, kProbabilityClamp);
}

ad::Var alignment_logits(const ad::Var& f_v, const ad::Var& f_t, const ad::Var& inv_tau) {
  return ad::scale_by(ad::row_cosine(f_v, f_t), inv_tau);
}

ad::Var alignment_loss_graph(const ad::Var& f_v, const ad::Var& f_t, const ad::Var& inv_tau,
                             std::span<const std::uint8_t> labels, const ImbalanceWeights* weights) {
  const auto a = static_cast<Eigen::Index>(labels.size());
  if (f_v.rows() != a || f_t.rows() != a) throw std::invalid_argument("alignment_loss: row count != A");
  check_labels(labels);
  Matrix y(a, 1);
  Matrix w = Matrix::Ones(a, 1);
  for (Eigen::Index j = 0; j < a; ++j) {
    const auto label = labels[static_cast<std::size_t>(j)];
    y(j, 0) = label;
    if (weights != nullptr) w(j, 0) = weights->weight(static_cast<std::size_t>(j), label);
  }
  return ad::bce_with_logits(alignment_logits(f_v, f_t, inv_tau), y, w, kProbabilityClamp);
}

}  // namespace attrprompt
