// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"
#include "attrprompt/config.hpp"
#include "attrprompt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace testing {

using namespace attrprompt;

/// d_v = d_t = 16, d_vt = 8, K = 2, A = 3, 32x32 images with 16px patches.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.visual.image_height = 32;
  c.visual.image_width = 32;
  c.visual.patch_size = 16;
  c.visual.width = 16;
  c.visual.depth = 2;
  c.visual.heads = 2;
  c.visual.mlp_ratio = 2;
  c.visual.embed_dim = 8;
  c.text.width = 16;
  c.text.context_length = 8;
  c.text.depth = 2;
  c.text.heads = 2;
  c.text.mlp_ratio = 2;
  c.text.embed_dim = 8;
  c.text.vocab_size = 40;
  c.text.sos_id = 38;
  c.text.eos_id = 39;
  c.text.pad_id = 0;
  c.text_prompts.person_context = 2;
  c.text_prompts.attribute_context = 3;
  return c;
}

inline AttributeSchema tiny_schema() { return AttributeSchema({"hat", "backpack", "skirt"}); }

/// The desk-scale synthetic benchmark configuration.
inline RunConfig toy_run_config() {
  RunConfig c;
  auto& v = c.model.visual;
  v.image_height = 32;
  v.image_width = 32;
  v.patch_size = 8;
  v.width = 32;
  v.depth = 2;
  v.heads = 2;
  v.mlp_ratio = 2;
  v.embed_dim = 16;
  auto& t = c.model.text;
  t.width = 32;
  t.context_length = 8;
  t.depth = 2;
  t.heads = 4;
  t.mlp_ratio = 2;
  t.embed_dim = 16;
  t.vocab_size = 64;
  t.sos_id = 62;
  t.eos_id = 63;
  t.pad_id = 0;
  c.model.text_prompts.person_context = 2;
  c.model.text_prompts.attribute_context = 4;
  c.train.epochs = 30;
  c.train.batch_size = 16;
  c.train.learning_rate = 2e-3;
  c.data.synthetic = SyntheticSpec{};
  c.data.normalization = Normalization::symmetric();
  return c;
}

inline Image random_image(int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Image img(h, w);
  for (auto& p : img.pixels) p = d(rng);
  return img;
}

inline std::vector<std::uint8_t> random_labels(std::size_t a, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  std::vector<std::uint8_t> y(a);
  for (auto& v : y) v = b(rng) ? 1 : 0;
  return y;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

struct GradCheck {
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
};

/// Central differences of `loss` with respect to `target`, compared against
/// the gradient the reverse pass leaves in `target.grad`.
inline GradCheck check_gradient(Parameter& target, const std::function<double()>& loss, const Matrix& analytic,
                                double h = 1e-6) {
  Matrix numeric(target.value.rows(), target.value.cols());
  for (Eigen::Index i = 0; i < target.value.size(); ++i) {
    const double orig = target.value.data()[i];
    target.value.data()[i] = orig + h;
    const double up = loss();
    target.value.data()[i] = orig - h;
    const double down = loss();
    target.value.data()[i] = orig;
    numeric.data()[i] = (up - down) / (2.0 * h);
  }
  GradCheck out;
  out.analytic_norm = analytic.norm();
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-300});
  out.relative_error = (analytic - numeric).norm() / denom;
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("attrprompt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::equal(a.data(), a.data() + a.size(), b.data(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

}  // namespace testing
