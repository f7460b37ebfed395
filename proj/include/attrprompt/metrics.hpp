// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace attrprompt {

/// N x A binary matrix as rows of 0/1 values.
using BinaryMatrix = std::vector<std::vector<std::uint8_t>>;

enum class DegeneratePolicy {
  Skip,      // attributes lacking positives or negatives leave the mean
  ZeroRate,  // the undefined rate counts as 0
};

enum class EmptyInstancePolicy {
  Zero,  // tp / (n + eps) in the eps -> 0 limit: an undefined ratio is 0
  One,   // an undefined ratio counts as a perfect score
  Skip,  // the sample leaves that ratio's average
};

enum class F1Averaging {
  OfMeans,         // 2PR / (P + R) on the sample-averaged precision and recall
  MeanPerSample,   // average of per-sample F1
};

struct MetricOptions {
  DegeneratePolicy degenerate = DegeneratePolicy::Skip;
  EmptyInstancePolicy empty = EmptyInstancePolicy::Zero;
  F1Averaging f1 = F1Averaging::OfMeans;
};

struct AttributeRates {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t true_positives = 0;
  std::size_t true_negatives = 0;
  double tpr = 0.0;
  double tnr = 0.0;
  bool skipped = false;
};

struct MeanAccuracy {
  double value = 0.0;
  std::vector<AttributeRates> per_attribute;
  std::vector<std::size_t> skipped;
};

struct InstanceMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricReport {
  double mA = 0.0;
  InstanceMetrics instance;
  std::vector<AttributeRates> per_attribute;
  std::vector<std::size_t> skipped_attributes;
};

/// Mean over attributes of (TPR + TNR) / 2. Throws on shape mismatch, on
/// non-binary entries, or when every attribute is skipped.
MeanAccuracy mean_accuracy(const BinaryMatrix& preds, const BinaryMatrix& labels, const MetricOptions& options = {});

/// Set-based per-sample accuracy (|P n Y| / |P u Y|), precision, recall,
/// averaged over samples, then F1.
InstanceMetrics instance_metrics(const BinaryMatrix& preds, const BinaryMatrix& labels,
                                 const MetricOptions& options = {});

MetricReport evaluate(const BinaryMatrix& preds, const BinaryMatrix& labels, const MetricOptions& options = {});

BinaryMatrix binarize(const std::vector<std::vector<double>>& probabilities, double threshold = 0.5);

}  // namespace attrprompt
