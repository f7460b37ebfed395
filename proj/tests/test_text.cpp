// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "support.hpp"

#include "attrprompt/optim.hpp"

using namespace attrprompt;
using testing::random_matrix;

namespace {

TextEncoder make_encoder(int g, int s, int l, TextTemplate kind = TextTemplate::PersonAndAttribute,
                         AttributeSchema schema = testing::tiny_schema()) {
  auto tc = testing::tiny_model_config().text;
  tc.context_length = l;
  TextPromptConfig pc;
  pc.person_context = g;
  pc.attribute_context = s;
  pc.template_kind = kind;
  return TextEncoder(tc, pc, std::move(schema));
}

ParameterStore init_all(const TextEncoder& enc, std::uint64_t seed = 1) {
  ParameterStore store;
  std::mt19937_64 rng(seed);
  enc.init_encoder(store, rng);
  enc.init_bank(store, rng);
  return store;
}

/// Rows of a and b that differ anywhere.
std::vector<Eigen::Index> differing_rows(const Matrix& a, const Matrix& b) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    if (!testing::bit_equal(a.row(r), b.row(r))) out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("default context lengths put EOS at index 21 of 77") {
  const auto enc = make_encoder(4, 16, 77);
  const auto store = init_all(enc);
  const auto seqs = enc.assemble(store);
  REQUIRE(seqs.sequences.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(seqs.eos_positions[j] == 21);
    CHECK(seqs.sequences[j].rows() == 77);
    CHECK(seqs.sequences[j].cols() == 16);
  }
  const Matrix& table = store.at("text.token_embedding.weight").value;
  const Matrix& s0 = seqs.sequences[0].value();
  CHECK(testing::bit_equal(s0.row(0), table.row(38)));
  CHECK(testing::bit_equal(s0.row(21), table.row(39)));
  CHECK(testing::bit_equal(s0.row(22), table.row(0)));
  CHECK(testing::bit_equal(s0.block(1, 0, 4, 16), store.at("prompts.person_context").value));
  CHECK(testing::bit_equal(s0.block(5, 0, 16, 16), store.at("prompts.attribute_contexts").value.block(0, 0, 16, 16)));
}

TEST_CASE("without person context the template is SOS, attribute context, EOS, padding") {
  const auto enc = make_encoder(0, 3, 8);
  const auto store = init_all(enc);
  CHECK_FALSE(store.contains("prompts.person_context"));
  const auto seqs = enc.assemble(store);
  CHECK(seqs.eos_positions[1] == 4);
  const Matrix& s1 = seqs.sequences[1].value();
  CHECK(testing::bit_equal(s1.block(1, 0, 3, 16), store.at("prompts.attribute_contexts").value.block(3, 0, 3, 16)));
  CHECK(enc.encode(store).rows() == 3);
}

TEST_CASE("sequences of different attributes differ exactly in the attribute block") {
  const int g = 2, s = 3;
  const auto enc = make_encoder(g, s, 8);
  const auto store = init_all(enc);
  const auto seqs = enc.assemble(store);
  const auto rows = differing_rows(seqs.sequences[0].value(), seqs.sequences[2].value());
  // 0-based rows G+1 .. G+S, i.e. positions G+2 .. G+S+1 counted from one.
  CHECK(rows == std::vector<Eigen::Index>{g + 1, g + 2, g + 3});
  CHECK(seqs.sequences[0].node() != seqs.sequences[1].node());
}

TEST_CASE("contexts longer than the sequence are rejected") {
  CHECK_THROWS_AS(make_encoder(4, 3, 8), std::invalid_argument);
  CHECK_NOTHROW(make_encoder(3, 3, 8));
  CHECK_THROWS_AS(make_encoder(-1, 3, 8), std::invalid_argument);
}

TEST_CASE("text features have one row per attribute") {
  for (int a : {1, 3, 5}) {
    std::vector<std::string> names;
    for (int j = 0; j < a; ++j) names.push_back("attr" + std::to_string(j));
    const auto enc = make_encoder(2, 3, 8, TextTemplate::PersonAndAttribute, AttributeSchema(names));
    const auto f_t = enc.encode(init_all(enc));
    CHECK(f_t.rows() == a);
    CHECK(f_t.cols() == 8);
  }
}

TEST_CASE("copied attribute contexts give bit-identical features") {
  const auto enc = make_encoder(2, 3, 8);
  auto store = init_all(enc);
  Matrix& ctx = store.at("prompts.attribute_contexts").value;
  ctx.block(6, 0, 3, 16) = ctx.block(0, 0, 3, 16);
  const Matrix f_t = enc.encode(store).value();
  CHECK(testing::bit_equal(f_t.row(0), f_t.row(2)));
  CHECK_FALSE(testing::bit_equal(f_t.row(0), f_t.row(1)));
}

TEST_CASE("features ignore everything after EOS") {
  const auto enc = make_encoder(2, 3, 8);
  const auto store = init_all(enc);
  auto seqs = enc.assemble(store);
  const Matrix reference = enc.forward(store, seqs, false).value();
  const Matrix truncated = enc.forward(store, seqs, true).value();
  CHECK((reference - truncated).cwiseAbs().maxCoeff() < 1e-12);

  std::mt19937_64 rng(7);
  for (std::size_t j = 0; j < seqs.sequences.size(); ++j) {
    Matrix v = seqs.sequences[j].value();
    const auto tail = v.rows() - seqs.eos_positions[j] - 1;
    REQUIRE(tail > 0);
    v.bottomRows(tail) = random_matrix(tail, 16, rng, 10.0);
    seqs.sequences[j] = ad::constant(v);
  }
  const Matrix noisy = enc.forward(store, seqs, false).value();
  CHECK((reference - noisy).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("the same bank always produces the same features") {
  const auto enc = make_encoder(2, 3, 8);
  const auto store = init_all(enc);
  CHECK(testing::bit_equal(enc.encode(store).value(), enc.encode(store).value()));
  CHECK(testing::bit_equal(init_all(enc, 4).at("prompts.attribute_contexts").value,
                           init_all(enc, 4).at("prompts.attribute_contexts").value));
}

TEST_CASE("an optimizer step updates the bank and leaves the encoder untouched") {
  Model model(testing::tiny_model_config(), testing::tiny_schema());
  auto store = model.init(5);
  ParameterStore before = store;
  std::mt19937_64 rng(6);
  const Image img = testing::random_image(32, 32, rng);
  const std::vector<std::uint8_t> y = {0, 1, 1};
  store.zero_grad();
  const auto tokens = model.attribute_tokens(store, img);
  ad::backward(alignment_loss_graph(model.visual_features(store, tokens), model.text_features(store),
                                    model.inverse_temperature(store), y));
  CHECK(store.at("prompts.person_context").grad.norm() > 0.0);
  CHECK(store.at("prompts.attribute_contexts").grad.norm() > 0.0);
  AdamW opt;
  opt.step(store, 1e-2);
  for (const auto& [name, p] : store) {
    const bool same = testing::bit_equal(p.value, before.at(name).value);
    if (has_prefix(name, "text.")) {
      CHECK_MESSAGE(same, name);
      CHECK_FALSE(p.touched);
    }
    if (has_prefix(name, "prompts.person_context") || has_prefix(name, "prompts.attribute_contexts")) {
      CHECK_MESSAGE(!same, name);
    }
  }
}

TEST_CASE("bank gradients match finite differences") {
  auto cfg = testing::tiny_model_config();
  cfg.tau = 0.5;
  Model model(cfg, testing::tiny_schema());
  auto store = model.init(14);
  std::mt19937_64 rng(15);
  const Image img = testing::random_image(32, 32, rng);
  const std::vector<std::uint8_t> y = {1, 1, 0};
  auto loss = [&] {
    const auto tokens = model.attribute_tokens(store, img);
    return alignment_loss_graph(model.visual_features(store, tokens), model.text_features(store),
                                model.inverse_temperature(store), y);
  };
  store.zero_grad();
  ad::backward(loss());
  for (const char* name : {"prompts.person_context", "prompts.attribute_contexts"}) {
    Parameter& p = store.at(name);
    const Matrix analytic = p.grad;
    const auto r = testing::check_gradient(
        p,
        [&] {
          ad::NoGradGuard guard;
          return loss().scalar();
        },
        analytic);
    CHECK_MESSAGE(r.relative_error < 1e-4, name);
    CHECK(r.analytic_norm > 0.0);
  }
}

TEST_CASE("tokenizer splits words and avoids special ids") {
  const auto enc = make_encoder(2, 3, 8);
  const auto a = enc.tokenize("LongHair");
  const auto b = enc.tokenize("long_hair");
  CHECK(a.size() == 2);
  CHECK(a == b);
  CHECK(enc.tokenize("hat") == enc.tokenize("Hat"));
  for (int id : enc.tokenize("upper body logo short sleeve plaid")) {
    CHECK(id != 0);
    CHECK(id != 38);
    CHECK(id != 39);
    CHECK(id < 40);
  }
  CHECK(enc.tokenize("--").empty());
}

TEST_CASE("attribute-phrase initialization copies the embedded name, padded to S") {
  auto tc = testing::tiny_model_config().text;
  TextPromptConfig pc;
  pc.person_context = 1;
  pc.attribute_context = 3;
  pc.init = ContextInit::AttributePhrase;
  pc.attribute_token_ids["backpack"] = {5, 6};
  TextEncoder enc(tc, pc, testing::tiny_schema());
  const auto store = init_all(enc);
  const Matrix& ctx = store.at("prompts.attribute_contexts").value;
  const Matrix& table = store.at("text.token_embedding.weight").value;
  CHECK(testing::bit_equal(ctx.row(3), table.row(5)));
  CHECK(testing::bit_equal(ctx.row(4), table.row(6)));
  CHECK(testing::bit_equal(ctx.row(5), table.row(0)));
  CHECK(testing::bit_equal(ctx.row(0), table.row(enc.tokenize("hat").front())));
}

TEST_CASE("person-only template embeds the attribute name") {
  auto tc = testing::tiny_model_config().text;
  TextPromptConfig pc;
  pc.person_context = 2;
  pc.template_kind = TextTemplate::PersonOnly;
  pc.attribute_token_ids["skirt"] = {7, 8, 9};
  TextEncoder enc(tc, pc, testing::tiny_schema());
  const auto store = init_all(enc);
  CHECK_FALSE(store.contains("prompts.attribute_contexts"));
  const auto seqs = enc.assemble(store);
  CHECK(seqs.eos_positions[0] == 4);
  CHECK(seqs.eos_positions[2] == 6);
  const Matrix& table = store.at("text.token_embedding.weight").value;
  CHECK(testing::bit_equal(seqs.sequences[2].value().row(3), table.row(7)));
  CHECK(enc.encode(store).rows() == 3);

  pc.attribute_token_ids["skirt"] = {7, 8, 9, 10, 11};
  CHECK_THROWS_AS(TextEncoder(tc, pc, testing::tiny_schema()), std::invalid_argument);
  pc.attribute_token_ids["skirt"] = {41};
  CHECK_THROWS_AS(TextEncoder(tc, pc, testing::tiny_schema()), std::invalid_argument);
}
