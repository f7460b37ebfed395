// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/model.hpp"

#include <opencv2/imgproc.hpp>

#include <cmath>
#include <set>
#include <stdexcept>

namespace attrprompt {

namespace {

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ", ") + x;
  return out;
}

std::string map_key(const std::string& key) {
  for (const char* keep : {"visual.", "text.", "prompts.", "head.", "alignment."}) {
    if (has_prefix(key, keep)) return key;
  }
  return "text." + key;
}

Matrix resample_positions(const Matrix& table, int rows, int cols) {
  const Eigen::Index old_patches = table.rows() - 1;
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(old_patches))));
  if (side * side != old_patches) {
    throw std::invalid_argument("positional table with " + std::to_string(old_patches) +
                                " patch rows is not a square grid");
  }
  Matrix out(1 + static_cast<Eigen::Index>(rows) * cols, table.cols());
  out.row(0) = table.row(0);
  cv::Mat src(side, side, CV_64F);
  cv::Mat dst;
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    for (int i = 0; i < side * side; ++i) src.at<double>(i / side, i % side) = table(1 + i, c);
    cv::resize(src, dst, cv::Size(cols, rows), 0, 0, cv::INTER_LINEAR);
    for (int i = 0; i < rows * cols; ++i) out(1 + i, c) = dst.at<double>(i / cols, i % cols);
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  visual.validate();
  text.validate();
  if (!(tau > 0.0)) throw std::invalid_argument("temperature tau must be > 0");
  if (!(prompt_init_std > 0.0)) throw std::invalid_argument("prompt_init_std must be > 0");
  if (mode != AblationMode::Full && learnable_tau) {
    throw std::invalid_argument("learnable_tau requires the full mode");
  }
  if (text.embed_dim != visual.embed_dim) {
    throw std::invalid_argument("text embed_dim " + std::to_string(text.embed_dim) + " != visual embed_dim " +
                                std::to_string(visual.embed_dim));
  }
}

Model::Model(ModelConfig config, AttributeSchema schema)
    : config_(std::move(config)),
      schema_(std::move(schema)),
      vision_(config_.visual),
      text_(config_.text, config_.text_prompts, schema_),
      head_(config_.head, static_cast<int>(schema_.size()), config_.visual.width) {
  config_.validate();
}

ParameterStore Model::init(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  ParameterStore store;
  vision_.init_parameters(store, rng);
  if (uses_prompts()) {
    store.add("prompts.visual", gaussian(static_cast<Eigen::Index>(attributes()), config_.visual.width,
                                         config_.prompt_init_std, rng));
    if (config_.prompt_init == PromptInit::ClassToken) prompts_from_class_token(store);
  }
  head_.init_parameters(store, rng);
  if (uses_text()) {
    text_.init_encoder(store, rng);
    text_.init_bank(store, rng);
    store.add("alignment.log_tau", Matrix::Constant(1, 1, std::log(config_.tau)));
  }
  apply_freeze(store);
  return store;
}

std::vector<std::string> Model::frozen_prefixes() const {
  std::vector<std::string> out;
  if (!config_.unfreeze_text) out.emplace_back("text.");
  if (!config_.train_visual_encoder || config_.mode == AblationMode::FrozenProbe) out.emplace_back("visual.");
  if (!config_.learnable_tau) out.emplace_back("alignment.");
  return out;
}

std::vector<std::string> Model::apply_freeze(ParameterStore& store) const {
  for (auto& [name, p] : store) p.trainable = true;
  auto prefixes = frozen_prefixes();
  store.freeze(prefixes);
  return prefixes;
}

void Model::prompts_from_class_token(ParameterStore& store) const {
  const Matrix& cls = store.at("visual.class_embedding").value;
  auto& prompts = store.at("prompts.visual");
  for (Eigen::Index j = 0; j < prompts.value.rows(); ++j) prompts.value.row(j) = cls.row(0);
}

ad::Var Model::attribute_tokens(const ParameterStore& store, const Image& image,
                                std::vector<std::vector<Matrix>>* attention) const {
  return attribute_tokens(store, ad::constant(vision_.patchify(image)), attention);
}

ad::Var Model::attribute_tokens(const ParameterStore& store, const ad::Var& patch_pixels,
                                std::vector<std::vector<Matrix>>* attention) const {
  ad::Var prompts;
  if (uses_prompts()) {
    prompts = param(store, "prompts.visual");
    if (prompts.rows() != static_cast<Eigen::Index>(attributes())) {
      throw std::invalid_argument("prompts.visual has " + std::to_string(prompts.rows()) + " rows, schema has " +
                                  std::to_string(attributes()) + " attributes");
    }
  }
  auto out = vision_.forward(store, patch_pixels, prompts, attention != nullptr);
  if (attention != nullptr) *attention = std::move(out.attention);
  if (uses_prompts()) return vision_.finalize(store, out.prompt_tokens);
  ad::Var cls = vision_.finalize(store, out.class_token);
  return ad::concat_rows(std::vector<ad::Var>(attributes(), cls));
}

bool Model::has_text_parameters(const ParameterStore& store) const {
  if (!uses_text()) return false;
  for (const auto& n : text_.encoder_parameter_names()) {
    if (!store.contains(n)) return false;
  }
  for (const auto& n : text_.bank_parameter_names()) {
    if (!store.contains(n)) return false;
  }
  return true;
}

ad::Var Model::text_features(const ParameterStore& store) const {
  if (!uses_text()) throw std::invalid_argument("the text branch is disabled in this mode");
  if (!has_text_parameters(store)) throw std::invalid_argument("checkpoint has no text-branch parameters");
  return text_.encode(store);
}

ad::Var Model::inverse_temperature(const ParameterStore& store) const {
  if (store.contains("alignment.log_tau")) return ad::exp(ad::scale(param(store, "alignment.log_tau"), -1.0));
  return ad::constant(Matrix::Constant(1, 1, 1.0 / config_.tau));
}

double Model::temperature(const ParameterStore& store) const {
  if (const auto* p = store.find("alignment.log_tau")) return std::exp(p->value(0, 0));
  return config_.tau;
}

Eigen::Index Model::prompt_position(std::size_t j) const {
  if (j >= attributes()) throw std::out_of_range("attribute index out of range");
  if (!uses_prompts()) return 0;
  return 1 + config_.visual.patch_count() + static_cast<Eigen::Index>(j);
}

std::size_t strip_text_parameters(ParameterStore& store) {
  std::size_t n = store.erase_prefix("text.");
  n += store.erase_prefix("prompts.person_context");
  n += store.erase_prefix("prompts.attribute_contexts");
  n += store.erase_prefix("alignment.");
  return n;
}

LoadReport load_pretrained(const Model& model, ParameterStore& store, const ArrayFile& file, bool strict) {
  LoadReport report;
  std::set<std::string> seen;
  for (const auto& [raw_key, array] : file.arrays) {
    if (raw_key == "logit_scale") {
      if (auto* p = store.find("alignment.log_tau")) {
        p->value(0, 0) = -array.data.at(0);
        report.temperature_loaded = true;
        seen.insert("alignment.log_tau");
      }
      continue;
    }
    const std::string key = map_key(raw_key);
    if (!model.uses_text() && has_prefix(key, "text.")) continue;
    Parameter* p = store.find(key);
    if (p == nullptr) {
      report.unexpected.push_back(raw_key);
      continue;
    }
    Matrix value = array.as_matrix();
    if (key == "visual.positional_embedding" && value.rows() != p->value.rows() && value.cols() == p->value.cols()) {
      value = resample_positions(value, model.config().visual.grid_rows(), model.config().visual.grid_cols());
      report.resized.push_back(key);
    }
    if (value.rows() != p->value.rows() || value.cols() != p->value.cols()) {
      throw std::invalid_argument("pretrained '" + raw_key + "' has shape " + std::to_string(value.rows()) + "x" +
                                  std::to_string(value.cols()) + ", model expects " +
                                  std::to_string(p->value.rows()) + "x" + std::to_string(p->value.cols()));
    }
    p->value = std::move(value);
    seen.insert(key);
    report.loaded.push_back(key);
  }
  const bool prompts_given = seen.count("prompts.visual") > 0;
  if (model.uses_prompts() && !prompts_given && seen.count("visual.class_embedding") > 0) {
    model.prompts_from_class_token(store);
  }
  for (const auto& [name, p] : store) {
    if (seen.count(name) > 0) continue;
    // The learnable bank and heads are not part of a pretrained encoder file.
    if (has_prefix(name, "prompts.") || has_prefix(name, "head.") || has_prefix(name, "alignment.")) continue;
    report.missing.push_back(name);
  }
  if (strict && (!report.missing.empty() || !report.unexpected.empty())) {
    throw std::invalid_argument("strict load failed; missing: [" + join(report.missing) + "], unexpected: [" +
                                join(report.unexpected) + "]");
  }
  return report;
}

LoadReport load_pretrained(const Model& model, ParameterStore& store, const std::filesystem::path& path,
                           bool strict) {
  return load_pretrained(model, store, read_array_file(path), strict);
}

}  // namespace attrprompt
