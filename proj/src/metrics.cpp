// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/metrics.hpp"

#include <optional>
#include <stdexcept>

namespace attrprompt {

namespace {

std::size_t check_shapes(const BinaryMatrix& preds, const BinaryMatrix& labels) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(preds.size()) + " prediction rows vs " +
                                std::to_string(labels.size()) + " label rows");
  }
  if (labels.empty()) throw std::invalid_argument("metrics: no samples");
  const std::size_t a = labels.front().size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != a || preds[i].size() != a) {
      throw std::invalid_argument("metrics: row " + std::to_string(i) + " has the wrong attribute count");
    }
    for (std::size_t j = 0; j < a; ++j) {
      if (labels[i][j] > 1 || preds[i][j] > 1) {
        throw std::invalid_argument("metrics: non-binary entry at row " + std::to_string(i));
      }
    }
  }
  return a;
}

std::optional<double> ratio(std::size_t num, std::size_t den, EmptyInstancePolicy policy) {
  if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
  switch (policy) {
    case EmptyInstancePolicy::Zero: return 0.0;
    case EmptyInstancePolicy::One: return 1.0;
    case EmptyInstancePolicy::Skip: return std::nullopt;
  }
  return std::nullopt;
}

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(std::optional<double> x) {
    if (x) {
      sum += *x;
      ++n;
    }
  }
  double value() const { return n == 0 ? 0.0 : sum / static_cast<double>(n); }
};

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

MeanAccuracy mean_accuracy(const BinaryMatrix& preds, const BinaryMatrix& labels, const MetricOptions& options) {
  const std::size_t a = check_shapes(preds, labels);
  MeanAccuracy out;
  out.per_attribute.resize(a);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t j = 0; j < a; ++j) {
    auto& r = out.per_attribute[j];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i][j]) {
        ++r.positives;
        r.true_positives += preds[i][j];
      } else {
        ++r.negatives;
        r.true_negatives += 1 - preds[i][j];
      }
    }
    r.tpr = r.positives ? static_cast<double>(r.true_positives) / static_cast<double>(r.positives) : 0.0;
    r.tnr = r.negatives ? static_cast<double>(r.true_negatives) / static_cast<double>(r.negatives) : 0.0;
    if ((r.positives == 0 || r.negatives == 0) && options.degenerate == DegeneratePolicy::Skip) {
      r.skipped = true;
      out.skipped.push_back(j);
      continue;
    }
    total += 0.5 * (r.tpr + r.tnr);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("mean_accuracy: every attribute lacks positives or negatives");
  out.value = total / static_cast<double>(counted);
  return out;
}

InstanceMetrics instance_metrics(const BinaryMatrix& preds, const BinaryMatrix& labels, const MetricOptions& options) {
  const std::size_t a = check_shapes(preds, labels);
  Mean acc, prec, rec, f1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t inter = 0, uni = 0, npred = 0, nlabel = 0;
    for (std::size_t j = 0; j < a; ++j) {
      const bool p = preds[i][j] != 0;
      const bool y = labels[i][j] != 0;
      inter += p && y;
      uni += p || y;
      npred += p;
      nlabel += y;
    }
    acc.add(ratio(inter, uni, options.empty));
    const auto p = ratio(inter, npred, options.empty);
    const auto r = ratio(inter, nlabel, options.empty);
    prec.add(p);
    rec.add(r);
    if (p && r) f1.add(harmonic(*p, *r));
  }
  InstanceMetrics out;
  out.accuracy = acc.value();
  out.precision = prec.value();
  out.recall = rec.value();
  out.f1 = options.f1 == F1Averaging::OfMeans ? harmonic(out.precision, out.recall) : f1.value();
  return out;
}

MetricReport evaluate(const BinaryMatrix& preds, const BinaryMatrix& labels, const MetricOptions& options) {
  auto ma = mean_accuracy(preds, labels, options);
  MetricReport report;
  report.mA = ma.value;
  report.per_attribute = std::move(ma.per_attribute);
  report.skipped_attributes = std::move(ma.skipped);
  report.instance = instance_metrics(preds, labels, options);
  return report;
}

BinaryMatrix binarize(const std::vector<std::vector<double>>& probabilities, double threshold) {
  BinaryMatrix out;
  out.reserve(probabilities.size());
  for (const auto& row : probabilities) {
    auto& b = out.emplace_back(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) b[j] = row[j] >= threshold ? 1 : 0;
  }
  return out;
}

}  // namespace attrprompt
