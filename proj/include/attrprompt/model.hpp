// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/data.hpp"
#include "attrprompt/losses.hpp"
#include "attrprompt/parameters.hpp"
#include "attrprompt/text.hpp"
#include "attrprompt/vision.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace attrprompt {

enum class AblationMode {
  FrozenProbe,    // fixed unprompted encoder, class token feeds the head
  VisualPrompts,  // attribute prompts + head, no text branch
  Full,           // attribute prompts + head + text prompts + alignment
};

enum class PromptInit {
  Gaussian,    // N(0, prompt_init_std^2) per entry
  ClassToken,  // every row copies visual.class_embedding
};

struct ModelConfig {
  VisualConfig visual;
  TextConfig text;
  TextPromptConfig text_prompts;
  HeadConfig head;
  AblationMode mode = AblationMode::Full;
  PromptInit prompt_init = PromptInit::Gaussian;
  double prompt_init_std = 0.02;
  double tau = kDefaultTemperature;
  bool learnable_tau = false;
  bool weighted_alignment = false;
  /// false trains prompts and heads only.
  bool train_visual_encoder = true;
  /// Experimental: lets the text encoder and its projection train.
  bool unfreeze_text = false;

  void validate() const;
};

/// Owns the architecture and naming; parameters live in a ParameterStore.
///
/// Extra names beyond the encoders: prompts.visual (A x d_v), head.* and
/// alignment.log_tau (1x1, log of the temperature).
class Model {
 public:
  Model(ModelConfig config, AttributeSchema schema);

  const ModelConfig& config() const { return config_; }
  const AttributeSchema& schema() const { return schema_; }
  const VisionEncoder& vision() const { return vision_; }
  const TextEncoder& text() const { return text_; }
  const PredictionHead& head() const { return head_; }
  std::size_t attributes() const { return schema_.size(); }
  bool uses_text() const { return config_.mode == AblationMode::Full; }
  bool uses_prompts() const { return config_.mode != AblationMode::FrozenProbe; }

  /// Random initialization of every parameter the mode needs, then the
  /// freeze policy.
  ParameterStore init(std::uint64_t seed) const;
  /// Sets `trainable` per the freeze policy. Returns the frozen prefixes.
  std::vector<std::string> apply_freeze(ParameterStore& store) const;
  std::vector<std::string> frozen_prefixes() const;

  /// Resets prompts.visual so that every row equals visual.class_embedding.
  void prompts_from_class_token(ParameterStore& store) const;

  /// A x d_v attribute tokens after the optional final norm. In frozen-probe
  /// mode the class token is repeated A times.
  ad::Var attribute_tokens(const ParameterStore& store, const Image& image,
                           std::vector<std::vector<Matrix>>* attention = nullptr) const;
  ad::Var attribute_tokens(const ParameterStore& store, const ad::Var& patch_pixels,
                           std::vector<std::vector<Matrix>>* attention = nullptr) const;
  ad::Var logits(const ParameterStore& store, const ad::Var& tokens) const { return head_.logits(store, tokens); }
  ad::Var visual_features(const ParameterStore& store, const ad::Var& tokens) const {
    return vision_.project(store, tokens);
  }
  /// A x d_vt text features. Throws when the store lacks text parameters.
  ad::Var text_features(const ParameterStore& store) const;
  bool has_text_parameters(const ParameterStore& store) const;

  ad::Var inverse_temperature(const ParameterStore& store) const;
  double temperature(const ParameterStore& store) const;

  /// Token row of attribute j in the visual sequence [class, patches, prompts].
  Eigen::Index prompt_position(std::size_t j) const;

 private:
  ModelConfig config_;
  AttributeSchema schema_;
  VisionEncoder vision_;
  TextEncoder text_;
  PredictionHead head_;
};

/// Removes everything the text-free path does not read.
std::size_t strip_text_parameters(ParameterStore& store);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // expected by the model, absent in the file
  std::vector<std::string> unexpected;  // present in the file, unknown to the model
  std::vector<std::string> resized;     // positional tables resampled to the grid
  bool temperature_loaded = false;
};

/// Loads a named-parameter checkpoint in the common dual-encoder key schema:
///   visual.*                      image tower, kept as is
///   token_embedding.weight, positional_embedding, transformer.*,
///   ln_final.*, text_projection   text tower, stored under text.*
///   logit_scale                   tau = exp(-logit_scale)
/// Keys already under text./prompts./head./alignment. are taken verbatim.
/// 4-D patch kernels are flattened (c, ky, kx); a square visual positional
/// grid is bilinearly resampled to the configured grid. Prompts missing from
/// the file are set from the class token. Strict mode throws on missing or
/// unexpected keys; permissive mode reports them.
LoadReport load_pretrained(const Model& model, ParameterStore& store, const ArrayFile& file, bool strict);
LoadReport load_pretrained(const Model& model, ParameterStore& store, const std::filesystem::path& path,
                           bool strict);

}  // namespace attrprompt
