// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/data.hpp"
#include "attrprompt/parameters.hpp"
#include "attrprompt/transformer.hpp"

#include <random>
#include <string>
#include <vector>

namespace attrprompt {

enum class PromptAttention {
  Full,            // every token attends to every token
  IsolatePrompts,  // class and patch tokens cannot attend to prompt tokens
};

struct VisualConfig {
  int image_height = 256;
  int image_width = 192;
  int patch_size = 16;
  int width = 768;      // token width d_v
  int depth = 12;       // number of blocks K
  int heads = 12;
  int mlp_ratio = 4;
  int embed_dim = 512;  // shared space width d_vt
  /// Apply the final layer norm to prompt tokens before projection and head.
  bool normalize_prompts = true;
  PromptAttention attention = PromptAttention::Full;

  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int patch_count() const { return grid_rows() * grid_cols(); }
  BlockShape block() const { return {width, heads, mlp_ratio}; }
  void validate() const;
};

struct VisualEncoderOutput {
  ad::Var class_token;    // 1 x d_v
  ad::Var patch_tokens;   // P_v x d_v
  ad::Var prompt_tokens;  // A x d_v, schema order
  /// attention[block][head] is a T x T row-stochastic matrix over the token
  /// order [class, patches..., prompts...]. Filled only when requested.
  std::vector<std::vector<Matrix>> attention;
};

/// Patch-embedding transformer. Parameters live under `visual.`:
///   conv1.weight (d_v x 3*p*p, channel-major patch layout), class_embedding
///   (1 x d_v), positional_embedding ((1+P_v) x d_v), ln_pre, the blocks under
///   transformer.resblocks.<i>., ln_post, proj (d_v x d_vt, no bias).
class VisionEncoder {
 public:
  explicit VisionEncoder(VisualConfig config);

  const VisualConfig& config() const { return config_; }
  void init_parameters(ParameterStore& store, std::mt19937_64& rng) const;
  std::vector<std::string> parameter_names() const;

  /// P_v x 3p^2 patch matrix, grid row-major, features ordered (c, ky, kx).
  Matrix patchify(const Image& image) const;

  /// Runs [class, patches, prompts] through the blocks. Positional embeddings
  /// and the pre-norm cover class and patch tokens only; prompts join after.
  /// `prompts` may be undefined to run the unprompted encoder.
  VisualEncoderOutput forward(const ParameterStore& store, const Image& image, const ad::Var& prompts,
                              bool retain_attention = false) const;
  /// Same, from a patch matrix as produced by `patchify`.
  VisualEncoderOutput forward(const ParameterStore& store, const ad::Var& patch_pixels, const ad::Var& prompts,
                              bool retain_attention = false) const;

  /// Final layer norm when `normalize_prompts`, identity otherwise.
  ad::Var finalize(const ParameterStore& store, const ad::Var& tokens) const;
  /// Bias-free linear map into the shared space.
  ad::Var project(const ParameterStore& store, const ad::Var& tokens) const;

 private:
  VisualConfig config_;
};

enum class HeadKind {
  PerAttribute,  // one affine d_v -> 1 map per attribute row
  SharedMlp,     // one d_v -> hidden -> 1 MLP applied to every row
};

struct HeadConfig {
  HeadKind kind = HeadKind::PerAttribute;
  int hidden = 0;  // SharedMlp width; 0 means d_v
};

/// Maps A x d_v attribute tokens to A x 1 logits; logit j reads row j only.
/// Parameters under `head.`: weight (A x d_v) and bias (A x 1), or
/// fc1.{weight,bias} / fc2.{weight,bias} for the shared MLP.
class PredictionHead {
 public:
  PredictionHead(HeadConfig config, int attributes, int width);

  void init_parameters(ParameterStore& store, std::mt19937_64& rng) const;
  ad::Var logits(const ParameterStore& store, const ad::Var& tokens) const;
  const HeadConfig& config() const { return config_; }

 private:
  HeadConfig config_;
  int attributes_;
  int width_;
};

}  // namespace attrprompt
