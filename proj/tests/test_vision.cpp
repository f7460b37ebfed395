// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "support.hpp"

using namespace attrprompt;
using testing::random_image;
using testing::random_matrix;

namespace {

struct Fixture {
  VisualConfig config = testing::tiny_model_config().visual;
  VisionEncoder encoder{config};
  ParameterStore store;
  std::mt19937_64 rng{21};

  Fixture() { encoder.init_parameters(store, rng); }
  Image image() { return random_image(config.image_height, config.image_width, rng); }
};

}  // namespace

TEST_CASE("tiny encoder output shapes") {
  Fixture f;
  const auto out = f.encoder.forward(f.store, f.image(), ad::constant(random_matrix(3, 16, f.rng)), true);
  CHECK(out.class_token.rows() == 1);
  CHECK(out.class_token.cols() == 16);
  CHECK(out.patch_tokens.rows() == 4);
  CHECK(out.patch_tokens.cols() == 16);
  CHECK(out.prompt_tokens.rows() == 3);
  CHECK(out.prompt_tokens.cols() == 16);
  REQUIRE(out.attention.size() == 2);
  REQUIRE(out.attention[0].size() == 2);
  const Matrix& a = out.attention[1][0];
  CHECK(a.rows() == 8);
  CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(out.prompt_tokens.value().allFinite());
}

TEST_CASE("config invariants are enforced") {
  auto c = testing::tiny_model_config().visual;
  c.depth = 0;
  CHECK_THROWS_AS(VisionEncoder{c}, std::invalid_argument);
  c = testing::tiny_model_config().visual;
  c.image_width = 30;
  try {
    VisionEncoder e{c};
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("image_width") != std::string::npos);
  }
  c = testing::tiny_model_config().visual;
  c.heads = 3;
  CHECK_THROWS_AS(VisionEncoder{c}, std::invalid_argument);
}

TEST_CASE("dimension mismatches name the dimension") {
  Fixture f;
  std::mt19937_64 rng(1);
  auto message = [&](const Image& img, const ad::Var& prompts) {
    try {
      f.encoder.forward(f.store, img, prompts);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(random_image(16, 32, rng), ad::constant(Matrix::Zero(3, 16))).find("height") != std::string::npos);
  CHECK(message(random_image(32, 48, rng), ad::constant(Matrix::Zero(3, 16))).find("width") != std::string::npos);
  CHECK(message(random_image(32, 32, rng), ad::constant(Matrix::Zero(3, 12))).find("width") != std::string::npos);
}

TEST_CASE("zeroed attention and MLP outputs pass prompts through unchanged") {
  auto c = testing::tiny_model_config().visual;
  c.depth = 1;
  VisionEncoder enc(c);
  ParameterStore store;
  std::mt19937_64 rng(3);
  enc.init_parameters(store, rng);
  const std::string b = "visual.transformer.resblocks.0.";
  for (const char* n : {"attn.out_proj.weight", "attn.out_proj.bias", "mlp.c_proj.weight", "mlp.c_proj.bias"}) {
    store.at(b + n).value.setZero();
  }
  const Matrix prompts = random_matrix(3, 16, rng);
  const auto out = enc.forward(store, random_image(32, 32, rng), ad::constant(prompts));
  CHECK(testing::bit_equal(out.prompt_tokens.value(), prompts));
}

TEST_CASE("projection: identity, zero rows and a matrix-product oracle") {
  auto c = testing::tiny_model_config().visual;
  c.embed_dim = c.width;
  VisionEncoder enc(c);
  ParameterStore store;
  std::mt19937_64 rng(4);
  enc.init_parameters(store, rng);
  Matrix tokens = random_matrix(3, 16, rng);

  store.at("visual.proj").value = Matrix::Identity(16, 16);
  CHECK(testing::bit_equal(enc.project(store, ad::constant(tokens)).value(), tokens));

  store.at("visual.proj").value = random_matrix(16, 16, rng);
  tokens.row(1).setZero();
  const Matrix f_v = enc.project(store, ad::constant(tokens)).value();
  CHECK(f_v.row(1).cwiseAbs().maxCoeff() == 0.0);
  const Matrix& w = store.at("visual.proj").value;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 16; ++k) {
      double acc = 0.0;
      for (int m = 0; m < 16; ++m) acc += tokens(i, m) * w(m, k);
      CHECK(std::abs(f_v(i, k) - acc) < 1e-6);
    }
  }

  tokens(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(enc.project(store, ad::constant(tokens)), std::invalid_argument);
}

TEST_CASE("per-attribute head: zero map, row locality and dot-product oracle") {
  std::mt19937_64 rng(5);
  PredictionHead head({}, 3, 16);
  ParameterStore store;
  head.init_parameters(store, rng);
  Matrix tokens = random_matrix(3, 16, rng);

  store.at("head.weight").value.setZero();
  const Matrix zero = head.logits(store, ad::constant(tokens)).value();
  CHECK(zero.cwiseAbs().maxCoeff() == 0.0);
  CHECK(1.0 / (1.0 + std::exp(-zero(0, 0))) == 0.5);

  store.at("head.weight").value = random_matrix(3, 16, rng);
  store.at("head.bias").value = random_matrix(3, 1, rng);
  const Matrix base = head.logits(store, ad::constant(tokens)).value();
  for (int i = 0; i < 3; ++i) {
    double dot = store.at("head.bias").value(i, 0);
    for (int m = 0; m < 16; ++m) dot += tokens(i, m) * store.at("head.weight").value(i, m);
    CHECK(std::abs(base(i, 0) - dot) < 1e-6);
  }

  tokens.row(1) += random_matrix(1, 16, rng);
  const Matrix moved = head.logits(store, ad::constant(tokens)).value();
  CHECK(moved(0, 0) == base(0, 0));
  CHECK(moved(2, 0) == base(2, 0));
  CHECK(moved(1, 0) != base(1, 0));

  CHECK_THROWS_AS(head.logits(store, ad::constant(random_matrix(4, 16, rng))), std::invalid_argument);
  CHECK_THROWS_AS(PredictionHead({}, 0, 16), std::invalid_argument);
}

TEST_CASE("shared MLP head keeps row locality") {
  std::mt19937_64 rng(6);
  PredictionHead head({HeadKind::SharedMlp, 8}, 3, 16);
  ParameterStore store;
  head.init_parameters(store, rng);
  Matrix tokens = random_matrix(3, 16, rng);
  const Matrix base = head.logits(store, ad::constant(tokens)).value();
  tokens.row(2) *= 3.0;
  const Matrix moved = head.logits(store, ad::constant(tokens)).value();
  CHECK(moved(0, 0) == base(0, 0));
  CHECK(moved(1, 0) == base(1, 0));
  CHECK(moved(2, 0) != base(2, 0));
}

TEST_CASE("permuting attributes permutes logits and shared features") {
  auto cfg = testing::tiny_model_config();
  cfg.mode = AblationMode::VisualPrompts;
  Model model(cfg, testing::tiny_schema());
  auto store = model.init(8);
  Model swapped(cfg, AttributeSchema({"skirt", "hat", "backpack"}));
  auto permuted = swapped.init(8);
  const int perm[] = {2, 0, 1};  // new row i holds old row perm[i]
  for (const char* n : {"prompts.visual", "head.weight", "head.bias"}) {
    const Matrix& src = store.at(n).value;
    Matrix dst(src.rows(), src.cols());
    for (int i = 0; i < 3; ++i) dst.row(i) = src.row(perm[i]);
    permuted.at(n).value = dst;
  }
  for (const auto& [name, p] : store) permuted.at(name).trainable = p.trainable;
  for (const auto& [name, p] : store) {
    if (!has_prefix(name, "prompts.") && !has_prefix(name, "head.")) permuted.at(name).value = p.value;
  }
  std::mt19937_64 rng(9);
  const Image img = random_image(32, 32, rng);
  ad::NoGradGuard guard;
  const auto t0 = model.attribute_tokens(store, img);
  const auto t1 = swapped.attribute_tokens(permuted, img);
  const Matrix l0 = model.logits(store, t0).value();
  const Matrix l1 = swapped.logits(permuted, t1).value();
  const Matrix f0 = model.visual_features(store, t0).value();
  const Matrix f1 = swapped.visual_features(permuted, t1).value();
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(l1(i, 0) - l0(perm[i], 0)) < 1e-12);
    CHECK((f1.row(i) - f0.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("isolated prompts leave class and patch outputs equal to the unprompted encoder") {
  auto c = testing::tiny_model_config().visual;
  c.attention = PromptAttention::IsolatePrompts;
  VisionEncoder enc(c);
  ParameterStore store;
  std::mt19937_64 rng(10);
  enc.init_parameters(store, rng);
  const Image img = random_image(32, 32, rng);
  const auto ref = enc.forward(store, img, ad::Var{});
  const auto with = enc.forward(store, img, ad::constant(random_matrix(3, 16, rng)), true);
  CHECK((ref.class_token.value() - with.class_token.value()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((ref.patch_tokens.value() - with.patch_tokens.value()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(with.attention[0][0].block(0, 5, 5, 3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(with.attention[0][0].block(5, 0, 3, 8).minCoeff() > 0.0);
}

TEST_CASE("prompt gradients are nonzero and match finite differences") {
  auto cfg = testing::tiny_model_config();
  cfg.mode = AblationMode::VisualPrompts;
  Model model(cfg, testing::tiny_schema());
  auto store = model.init(12);
  std::mt19937_64 rng(13);
  const Image img = random_image(32, 32, rng);
  const std::vector<std::uint8_t> y = {1, 0, 1};
  auto w = ImbalanceWeights::uniform(3);
  w.positive_weight = {1.0, 2.0, 0.5};
  w.negative_weight = {0.7, 1.3, 1.1};
  auto loss_var = [&] { return prediction_loss_graph(model.logits(store, model.attribute_tokens(store, img)), y, w); };
  store.zero_grad();
  ad::backward(loss_var());
  Parameter& prompts = store.at("prompts.visual");
  const Matrix analytic = prompts.grad;
  const auto check = testing::check_gradient(
      prompts,
      [&] {
        ad::NoGradGuard guard;
        return loss_var().scalar();
      },
      analytic);
  CHECK(check.analytic_norm > 0.0);
  CHECK(check.relative_error < 1e-4);
}

TEST_CASE("class-token prompt initialization") {
  auto cfg = testing::tiny_model_config();
  cfg.prompt_init = PromptInit::ClassToken;
  Model model(cfg, testing::tiny_schema());
  const auto store = model.init(1);
  const Matrix& p = store.at("prompts.visual").value;
  REQUIRE(p.rows() == 3);
  for (int j = 0; j < 3; ++j) CHECK(testing::bit_equal(p.row(j), store.at("visual.class_embedding").value));

  cfg.prompt_init = PromptInit::Gaussian;
  Model gaussian(cfg, testing::tiny_schema());
  const Matrix g = gaussian.init(1).at("prompts.visual").value;
  const double sd = std::sqrt(g.array().square().mean());
  CHECK(sd > 0.005);
  CHECK(sd < 0.05);
}

TEST_CASE("pretrained loader maps keys, resamples positions and seeds prompts") {
  auto cfg = testing::tiny_model_config();
  Model model(cfg, testing::tiny_schema());
  auto store = model.init(2);
  const auto reference = model.init(3);

  ArrayFile file;
  for (const auto& [name, p] : reference) {
    if (has_prefix(name, "prompts.") || has_prefix(name, "head.") || has_prefix(name, "alignment.")) continue;
    const std::string key = has_prefix(name, "text.") ? name.substr(5) : name;
    file.arrays[key] = NamedArray::from_matrix(p.value);
  }
  // 4-D patch kernel and a 3x3 positional grid that must be resampled to 2x2.
  const Matrix& conv = reference.at("visual.conv1.weight").value;
  NamedArray kernel = NamedArray::from_matrix(conv);
  kernel.shape = {16, 3, 16, 16};
  file.arrays["visual.conv1.weight"] = kernel;
  std::mt19937_64 rng(4);
  file.arrays["visual.positional_embedding"] = NamedArray::from_matrix(random_matrix(10, 16, rng));
  file.arrays["logit_scale"] = NamedArray{{}, {std::log(50.0)}};

  const auto report = load_pretrained(model, store, file, true);
  CHECK(report.missing.empty());
  CHECK(report.unexpected.empty());
  CHECK(report.temperature_loaded);
  CHECK(report.resized == std::vector<std::string>{"visual.positional_embedding"});
  CHECK(testing::bit_equal(store.at("visual.conv1.weight").value, conv));
  CHECK(testing::bit_equal(store.at("text.text_projection").value, reference.at("text.text_projection").value));
  CHECK(store.at("visual.positional_embedding").value.rows() == 5);
  CHECK(model.temperature(store) == doctest::Approx(1.0 / 50.0).epsilon(1e-12));
  for (int j = 0; j < 3; ++j) {
    CHECK(testing::bit_equal(store.at("prompts.visual").value.row(j), reference.at("visual.class_embedding").value));
  }
  CHECK_FALSE(store.at("text.text_projection").trainable);

  ArrayFile partial = file;
  partial.arrays.erase("visual.proj");
  partial.arrays["mystery"] = NamedArray{{1}, {1.0}};
  CHECK_THROWS_AS(load_pretrained(model, store, partial, true), std::invalid_argument);
  const auto loose = load_pretrained(model, store, partial, false);
  CHECK(loose.missing == std::vector<std::string>{"visual.proj"});
  CHECK(loose.unexpected == std::vector<std::string>{"mystery"});

  ArrayFile wrong;
  wrong.arrays["visual.proj"] = NamedArray::from_matrix(Matrix::Zero(3, 3));
  CHECK_THROWS_AS(load_pretrained(model, store, wrong, false), std::invalid_argument);
}
