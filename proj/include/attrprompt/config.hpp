// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/data.hpp"
#include "attrprompt/inference.hpp"
#include "attrprompt/losses.hpp"
#include "attrprompt/metrics.hpp"
#include "attrprompt/model.hpp"
#include "attrprompt/text.hpp"
#include "attrprompt/trainer.hpp"
#include "attrprompt/vision.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace attrprompt {

using nlohmann::json;

/// Where samples come from: an annotation file or the synthetic generator.
struct DataConfig {
  std::filesystem::path annotations;
  std::optional<SyntheticSpec> synthetic;
  Normalization normalization = Normalization::clip();
  WeightScheme weights = WeightScheme::Exponential;
};

/// Everything a `train` run needs. Unknown keys are rejected.
///
///   model:      visual, text, text_prompts, head, mode, prompt_init, tau, ...
///   train:      epochs, batch_size, learning_rate, weight_decay, schedule, ...
///   data:       annotations | synthetic, normalization, weights
///   pretrained: path, strict
///   output:     directory for checkpoints and the metrics log
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::filesystem::path pretrained;
  bool pretrained_strict = true;
  std::filesystem::path output;

  ImageOptions image_options() const {
    return {model.visual.image_height, model.visual.image_width, data.normalization};
  }
};

// JSON conversions. Missing keys keep their defaults.
void to_json(json& j, const VisualConfig& c);
void from_json(const json& j, VisualConfig& c);
void to_json(json& j, const TextConfig& c);
void from_json(const json& j, TextConfig& c);
void to_json(json& j, const TextPromptConfig& c);
void from_json(const json& j, TextPromptConfig& c);
void to_json(json& j, const HeadConfig& c);
void from_json(const json& j, HeadConfig& c);
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const LossSchedule& s);
void from_json(const json& j, LossSchedule& s);
void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);
void to_json(json& j, const Normalization& n);
void from_json(const json& j, Normalization& n);
void to_json(json& j, const SyntheticSpec& s);
void from_json(const json& j, SyntheticSpec& s);
void to_json(json& j, const DataConfig& c);
void from_json(const json& j, DataConfig& c);
void to_json(json& j, const RunConfig& c);
void from_json(const json& j, RunConfig& c);

/// Parses YAML (and therefore JSON) text into a JSON value. Quoted scalars
/// stay strings; plain scalars become null, booleans or numbers when they
/// read as such.
json parse_yaml(const std::string& text);

/// Reads a run config file. Relative paths inside it resolve against the
/// file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

struct PreparedData {
  AttributeSchema schema;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;
  std::vector<LabeledSample> test;
  ImbalanceWeights weights;
};

PreparedData prepare_data(const RunConfig& config);

struct TrainedModel {
  Model model;
  ParameterStore store;
  TrainResult result;
};

/// Builds the model, optionally loads pretrained weights, trains.
TrainedModel train_from_config(const RunConfig& config, const PreparedData& data,
                               const Trainer::EpochCallback& on_epoch = {});

/// Rebuilds the model a checkpoint was trained with.
Model model_from_checkpoint(const LoadedCheckpoint& ckpt);
ImageOptions image_options_from_checkpoint(const LoadedCheckpoint& ckpt);

}  // namespace attrprompt
