// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/vision.hpp"

#include <cmath>
#include <stdexcept>

namespace attrprompt {

namespace {

std::string block_prefix(int i) { return "visual.transformer.resblocks." + std::to_string(i) + "."; }

}  // namespace

void VisualConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("visual config: " + msg); };
  if (patch_size < 1) fail("patch_size must be >= 1");
  if (image_height < 1 || image_height % patch_size != 0) {
    fail("image_height " + std::to_string(image_height) + " is not a multiple of patch_size " +
         std::to_string(patch_size));
  }
  if (image_width < 1 || image_width % patch_size != 0) {
    fail("image_width " + std::to_string(image_width) + " is not a multiple of patch_size " +
         std::to_string(patch_size));
  }
  if (depth < 1) fail("depth K must be >= 1");
  if (width < 1) fail("width d_v must be >= 1");
  if (embed_dim < 1) fail("embed_dim d_vt must be >= 1");
  if (heads < 1 || width % heads != 0) fail("heads must divide width");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
}

VisionEncoder::VisionEncoder(VisualConfig config) : config_(config) { config_.validate(); }

void VisionEncoder::init_parameters(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = config_.width;
  const int p = config_.patch_size;
  const double scale = std::pow(d, -0.5);
  store.add("visual.conv1.weight", gaussian(d, 3 * p * p, std::pow(3.0 * p * p, -0.5), rng));
  store.add("visual.class_embedding", gaussian(1, d, scale, rng));
  store.add("visual.positional_embedding", gaussian(1 + config_.patch_count(), d, scale, rng));
  store.add("visual.ln_pre.weight", Matrix::Ones(1, d));
  store.add("visual.ln_pre.bias", Matrix::Zero(1, d));
  for (int i = 0; i < config_.depth; ++i) init_block(store, block_prefix(i), config_.block(), config_.depth, rng);
  store.add("visual.ln_post.weight", Matrix::Ones(1, d));
  store.add("visual.ln_post.bias", Matrix::Zero(1, d));
  store.add("visual.proj", gaussian(d, config_.embed_dim, scale, rng));
}

std::vector<std::string> VisionEncoder::parameter_names() const {
  std::vector<std::string> out = {"visual.conv1.weight", "visual.class_embedding", "visual.positional_embedding",
                                  "visual.ln_pre.weight", "visual.ln_pre.bias"};
  for (int i = 0; i < config_.depth; ++i) {
    for (auto& n : block_parameter_names(block_prefix(i))) out.push_back(std::move(n));
  }
  for (const char* n : {"visual.ln_post.weight", "visual.ln_post.bias", "visual.proj"}) out.emplace_back(n);
  return out;
}

Matrix VisionEncoder::patchify(const Image& image) const {
  if (image.height != config_.image_height) {
    throw std::invalid_argument("image height " + std::to_string(image.height) + " != configured " +
                                std::to_string(config_.image_height));
  }
  if (image.width != config_.image_width) {
    throw std::invalid_argument("image width " + std::to_string(image.width) + " != configured " +
                                std::to_string(config_.image_width));
  }
  if (image.pixels.size() != std::size_t(image.height) * image.width * 3) {
    throw std::invalid_argument("image channel count != 3");
  }
  const int p = config_.patch_size;
  const int cols = config_.grid_cols();
  Matrix patches(config_.patch_count(), 3 * p * p);
  for (int gy = 0; gy < config_.grid_rows(); ++gy) {
    for (int gx = 0; gx < cols; ++gx) {
      auto row = patches.row(gy * cols + gx);
      for (int c = 0; c < 3; ++c) {
        for (int ky = 0; ky < p; ++ky) {
          for (int kx = 0; kx < p; ++kx) row(c * p * p + ky * p + kx) = image.at(gy * p + ky, gx * p + kx, c);
        }
      }
    }
  }
  return patches;
}

VisualEncoderOutput VisionEncoder::forward(const ParameterStore& store, const Image& image, const ad::Var& prompts,
                                           bool retain_attention) const {
  return forward(store, ad::constant(patchify(image)), prompts, retain_attention);
}

VisualEncoderOutput VisionEncoder::forward(const ParameterStore& store, const ad::Var& patch_pixels,
                                           const ad::Var& prompts, bool retain_attention) const {
  const int d = config_.width;
  const int n_patches = config_.patch_count();
  const Eigen::Index n_prompts = prompts.defined() ? prompts.rows() : 0;
  if (prompts.defined() && prompts.cols() != d) {
    throw std::invalid_argument("prompt token width " + std::to_string(prompts.cols()) + " != d_v " +
                                std::to_string(d));
  }

  const int p = config_.patch_size;
  if (patch_pixels.rows() != n_patches || patch_pixels.cols() != 3 * p * p) {
    throw std::invalid_argument("patch matrix is " + std::to_string(patch_pixels.rows()) + "x" +
                                std::to_string(patch_pixels.cols()) + ", expected " + std::to_string(n_patches) +
                                "x" + std::to_string(3 * p * p));
  }
  ad::Var patches = ad::matmul_nt(patch_pixels, param(store, "visual.conv1.weight"));
  ad::Var x = ad::concat_rows({param(store, "visual.class_embedding"), patches});
  x = ad::add(x, param(store, "visual.positional_embedding"));
  x = ad::layer_norm(x, param(store, "visual.ln_pre.weight"), param(store, "visual.ln_pre.bias"));
  if (n_prompts > 0) x = ad::concat_rows({x, prompts});

  const Eigen::Index tokens = 1 + n_patches + n_prompts;
  ad::BoolMatrix mask;
  const ad::BoolMatrix* blocked = nullptr;
  if (config_.attention == PromptAttention::IsolatePrompts && n_prompts > 0) {
    mask = ad::BoolMatrix::Constant(tokens, tokens, false);
    mask.block(0, 1 + n_patches, 1 + n_patches, n_prompts).setConstant(true);
    blocked = &mask;
  }

  VisualEncoderOutput out;
  for (int i = 0; i < config_.depth; ++i) {
    std::vector<Matrix>* maps = nullptr;
    if (retain_attention) maps = &out.attention.emplace_back();
    x = block_forward(store, block_prefix(i), config_.block(), x, blocked, maps);
  }
  out.class_token = ad::slice_rows(x, 0, 1);
  out.patch_tokens = ad::slice_rows(x, 1, n_patches);
  out.prompt_tokens = ad::slice_rows(x, 1 + n_patches, n_prompts);
  return out;
}

ad::Var VisionEncoder::finalize(const ParameterStore& store, const ad::Var& tokens) const {
  if (!config_.normalize_prompts) return tokens;
  return ad::layer_norm(tokens, param(store, "visual.ln_post.weight"), param(store, "visual.ln_post.bias"));
}

ad::Var VisionEncoder::project(const ParameterStore& store, const ad::Var& tokens) const {
  for (Eigen::Index i = 0; i < tokens.value().size(); ++i) {
    if (!std::isfinite(tokens.value().data()[i])) throw std::invalid_argument("project_visual: non-finite input");
  }
  return ad::matmul(tokens, param(store, "visual.proj"));
}

PredictionHead::PredictionHead(HeadConfig config, int attributes, int width)
    : config_(config), attributes_(attributes), width_(width) {
  if (attributes_ < 1) throw std::invalid_argument("prediction head needs at least one attribute");
  if (config_.hidden == 0) config_.hidden = width_;
}

void PredictionHead::init_parameters(ParameterStore& store, std::mt19937_64& rng) const {
  if (config_.kind == HeadKind::PerAttribute) {
    store.add("head.weight", gaussian(attributes_, width_, 0.02, rng));
    store.add("head.bias", Matrix::Zero(attributes_, 1));
  } else {
    store.add("head.fc1.weight", gaussian(config_.hidden, width_, std::pow(width_, -0.5), rng));
    store.add("head.fc1.bias", Matrix::Zero(1, config_.hidden));
    store.add("head.fc2.weight", gaussian(1, config_.hidden, 0.02, rng));
    store.add("head.fc2.bias", Matrix::Zero(1, 1));
  }
}

ad::Var PredictionHead::logits(const ParameterStore& store, const ad::Var& tokens) const {
  if (tokens.cols() != width_) throw std::invalid_argument("prediction head: token width mismatch");
  if (config_.kind == HeadKind::PerAttribute) {
    const auto& w = store.at("head.weight");
    if (w.value.rows() != tokens.rows() || w.value.rows() != attributes_) {
      throw std::invalid_argument("prediction head has " + std::to_string(w.value.rows()) +
                                  " attribute rows, got " + std::to_string(tokens.rows()) + " tokens");
    }
    return ad::add(ad::row_sum(ad::mul(tokens, param(store, "head.weight"))), param(store, "head.bias"));
  }
  if (tokens.rows() != attributes_) {
    throw std::invalid_argument("prediction head expects " + std::to_string(attributes_) + " tokens");
  }
  ad::Var h = ad::quick_gelu(ad::add_row(ad::matmul_nt(tokens, param(store, "head.fc1.weight")),
                                         param(store, "head.fc1.bias")));
  return ad::add_row(ad::matmul_nt(h, param(store, "head.fc2.weight")), param(store, "head.fc2.bias"));
}

}  // namespace attrprompt
