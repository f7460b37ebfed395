// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/data.hpp"
#include "attrprompt/model.hpp"
#include "attrprompt/parameters.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace attrprompt {

enum class HeadSource {
  Ffn,        // sigmoid of the prediction head
  Alignment,  // sigmoid(cos(f_v, f_t) / tau)
};

HeadSource parse_head_source(const std::string& name);
std::string to_string(HeadSource source);

struct PredictionRecord {
  std::string id;
  std::vector<double> probabilities;
  std::vector<std::uint8_t> binary;
  HeadSource source = HeadSource::Ffn;

  nlohmann::json to_json() const;
};

/// Inference over a fixed parameter snapshot. The ffn head reads only the
/// visual encoder, visual prompts and head. The alignment head computes the
/// text features once at construction and reuses them for every image.
class Predictor {
 public:
  Predictor(const Model& model, const ParameterStore& store, HeadSource source = HeadSource::Ffn,
            double threshold = 0.5);

  PredictionRecord predict(const Image& image, const std::string& id = {}) const;
  std::vector<PredictionRecord> predict(const std::vector<LabeledSample>& samples) const;

  const Matrix& cached_text_features() const { return text_features_; }
  HeadSource source() const { return source_; }

 private:
  const Model& model_;
  const ParameterStore& store_;
  HeadSource source_;
  double threshold_;
  Matrix text_features_;
  double tau_ = kDefaultTemperature;
};

/// Attention rollout. `attention[block][head]` are T x T row-stochastic maps.
/// Per block the heads are averaged, mixed as 0.5 A + 0.5 I, re-normalized
/// by row and multiplied onto the running product. Returns row `query` of the
/// product restricted to columns [first, first + count).
std::vector<double> attention_rollout(const std::vector<std::vector<Matrix>>& attention, Eigen::Index query,
                                      Eigen::Index first, Eigen::Index count);

struct CamResult {
  Matrix patch_relevance;  // grid_rows x grid_cols
  Matrix heatmap;          // H x W, bilinear upsampling of the relevance
  int argmax_row = 0;      // patch grid coordinates of the maximum
  int argmax_col = 0;
};

enum class CamMethod {
  Rollout,   // attention rollout from the attribute's prompt row
  Gradient,  // ReLU of sum over each patch of input x d(logit_j)/d(input)
};

CamMethod parse_cam_method(const std::string& name);

/// Relevance of attribute `attribute`'s token over image patches. Throws
/// listing the schema when the attribute is unknown.
CamResult compute_cam(const Model& model, const ParameterStore& store, const Image& image,
                      const std::string& attribute, CamMethod method = CamMethod::Rollout);

/// Writes `display` (RGB in [0,1]) blended with a jet rendering of the
/// heatmap, red high and blue low. A constant heatmap renders uniformly.
void write_cam_overlay(const std::filesystem::path& path, const Image& display, const Matrix& heatmap,
                       double opacity = 0.5);

/// Convenience: compute_cam, then an overlay on the denormalized input.
CamResult emit_cam(const Model& model, const ParameterStore& store, const Image& image, const std::string& attribute,
                   const Normalization& normalization, const std::filesystem::path& out,
                   CamMethod method = CamMethod::Rollout);

struct LatencyReport {
  int batch = 0;
  int repeats = 0;
  double ffn_ms_per_image = 0.0;        // median over repeats
  double with_text_ms_per_image = 0.0;  // median over repeats
  double ratio = 0.0;                   // ffn / with_text

  nlohmann::json to_json() const;
};

/// Times the text-free path against the alignment path that runs the text
/// encoder inside every forward, as text-fused models do. Requires
/// repeats >= 10; runs `warmup` untimed rounds of each first.
LatencyReport latency_bench(const Model& model, const ParameterStore& store, const std::vector<Image>& batch,
                            int repeats, int warmup = 2);

}  // namespace attrprompt
