// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "support.hpp"

using namespace attrprompt;
using testing::random_matrix;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("self-similar and orthogonal rows") {
  Matrix f(2, 3);
  f << 1, 2, 3, -1, 0, 4;
  const auto same = aligned_similarity(f, f, 0.01);
  CHECK(same.similarities[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(same.y_hat_vt[1] == doctest::Approx(sigmoid(100.0)));
  CHECK(same.tau == 0.01);

  Matrix g(2, 3);
  g << 3, 0, -1, 4, 2, 1;
  const auto ortho = aligned_similarity(f, g, 0.1);
  CHECK(std::abs(ortho.similarities[0]) < 1e-15);
  CHECK(std::abs(ortho.similarities[1]) < 1e-15);
  CHECK(ortho.y_hat_vt[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("similarity matches a per-row cosine oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix u = random_matrix(4, 8, rng);
    const Matrix v = random_matrix(4, 8, rng);
    const auto out = aligned_similarity(u, v, 0.2);
    REQUIRE(out.similarities.size() == 4);
    for (int j = 0; j < 4; ++j) {
      double dot = 0, nu = 0, nv = 0;
      for (int k = 0; k < 8; ++k) {
        dot += u(j, k) * v(j, k);
        nu += u(j, k) * u(j, k);
        nv += v(j, k) * v(j, k);
      }
      const double cos = dot / (std::sqrt(nu) * std::sqrt(nv));
      CHECK(std::abs(out.similarities[j] - cos) < 1e-9);
      CHECK(std::abs(out.y_hat_vt[j] - sigmoid(cos / 0.2)) < 1e-9);
      CHECK(out.similarities[j] >= -1.0);
      CHECK(out.similarities[j] <= 1.0);
    }
  }
}

TEST_CASE("similarity errors") {
  Matrix u = Matrix::Ones(3, 4);
  Matrix v = Matrix::Ones(3, 4);
  CHECK_THROWS_AS(aligned_similarity(u, v, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(aligned_similarity(u, v, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(aligned_similarity(u, Matrix::Ones(3, 5), 0.1), std::invalid_argument);
  v.row(2).setZero();
  try {
    aligned_similarity(u, v, 0.1);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("prediction loss closed forms") {
  const auto uniform = ImbalanceWeights::uniform(2);
  const std::vector<double> zeros = {0.0, 0.0};
  const std::vector<std::uint8_t> y = {1, 0};
  CHECK(prediction_loss(zeros, y, uniform) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  auto doubled = uniform;
  for (auto& w : doubled.positive_weight) w *= 2.0;
  for (auto& w : doubled.negative_weight) w *= 2.0;
  const std::vector<double> z = {0.3, -1.7};
  CHECK(prediction_loss(z, y, doubled) == doctest::Approx(2.0 * prediction_loss(z, y, uniform)).epsilon(1e-14));

  const std::vector<double> perfect = {50.0, -50.0};
  CHECK(prediction_loss(perfect, y, uniform) <= 2.0 * -std::log(1.0 - 1e-7) + 1e-15);

  const std::vector<double> wrong = {-50.0, 50.0};
  CHECK(prediction_loss(wrong, y, uniform) == doctest::Approx(-2.0 * std::log(1e-7)).epsilon(1e-8));

  // Weighted form picks the weight by label.
  auto w = uniform;
  w.positive_weight = {3.0, 5.0};
  w.negative_weight = {7.0, 11.0};
  const double expected = -3.0 * std::log(sigmoid(0.3)) - 11.0 * std::log(1.0 - sigmoid(-1.7));
  CHECK(prediction_loss(z, y, w) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("batch losses are means over samples") {
  const auto uniform = ImbalanceWeights::uniform(2);
  Matrix logits(2, 2);
  logits << 0.0, 0.0, 1.0, -2.0;
  const std::vector<std::vector<std::uint8_t>> y = {{1, 0}, {0, 1}};
  const std::vector<double> r1 = {1.0, -2.0};
  const double mean = 0.5 * (2.0 * std::log(2.0) + prediction_loss(r1, y[1], uniform));
  CHECK(prediction_loss(logits, y, uniform) == doctest::Approx(mean).epsilon(1e-14));

  Matrix probs = Matrix::Constant(2, 3, 0.5);
  CHECK(alignment_loss(probs, {{1, 0, 1}, {0, 0, 0}}) == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("alignment loss closed forms and monotonicity") {
  const std::vector<double> half = {0.5, 0.5, 0.5};
  const std::vector<std::uint8_t> y = {1, 0, 1};
  CHECK(alignment_loss(half, y) == doctest::Approx(2.0794415417).epsilon(1e-10));
  const std::vector<double> exact = {1.0, 0.0, 1.0};
  CHECK(alignment_loss(exact, y) < 1e-6);
  double last = std::numeric_limits<double>::infinity();
  for (double p = 0.05; p < 1.0; p += 0.05) {
    const std::vector<double> q = {p, 0.3, 0.6};
    const double l = alignment_loss(q, y);
    CHECK(l < last);
    last = l;
  }
  const std::vector<double> bad = {1.5, 0.0, 0.0};
  CHECK_THROWS_AS(alignment_loss(bad, y), std::invalid_argument);
  const std::vector<std::uint8_t> bad_y = {2, 0, 1};
  CHECK_THROWS_AS(alignment_loss(half, bad_y), std::invalid_argument);
  CHECK_THROWS_AS(prediction_loss(half, bad_y, ImbalanceWeights::uniform(3)), std::invalid_argument);
}

TEST_CASE("standard schedule phases") {
  const auto s = LossSchedule::standard();
  using P = std::pair<double, double>;
  CHECK(loss_coefficients(0, s) == P{1.0, 0.0});
  CHECK(loss_coefficients(5, s) == P{1.0, 0.0});
  CHECK(loss_coefficients(9, s) == P{1.0, 0.0});
  CHECK(loss_coefficients(10, s) == P{0.0, 1.0});
  CHECK(loss_coefficients(15, s) == P{0.0, 1.0});
  CHECK(loss_coefficients(20, s) == P{1.0, 0.5});
  CHECK(loss_coefficients(50, s) == P{1.0, 0.5});
  CHECK(loss_coefficients(99, s) == P{1.0, 0.5});
  CHECK(combined_loss(5, 2.0, 3.0, s) == 2.0);
  CHECK(combined_loss(15, 2.0, 3.0, s) == 3.0);
  CHECK(combined_loss(50, 2.0, 3.0, s) == 3.5);
}

TEST_CASE("schedule coverage and validation") {
  const auto s = LossSchedule::standard(100);
  CHECK_NOTHROW(s.coefficients(99));
  CHECK_THROWS_AS(s.coefficients(100), std::out_of_range);
  CHECK_THROWS_AS(s.coefficients(-1), std::out_of_range);
  CHECK_THROWS_AS(LossSchedule({{1, 1.0, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(LossSchedule({{0, 1.0, 0.0}, {0, 0.0, 1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(LossSchedule({{0, -1.0, 0.0}}), std::invalid_argument);
  CHECK_THROWS_AS(LossSchedule(std::vector<LossPhase>{}), std::invalid_argument);
  CHECK(LossSchedule::constant(0.3, 0.7).coefficients(1000) == std::pair<double, double>{0.3, 0.7});
}

TEST_CASE("positive row scaling leaves alignment outputs unchanged") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  const std::vector<std::uint8_t> y = {1, 0, 1, 1};
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix u = random_matrix(4, 8, rng);
    const Matrix v = random_matrix(4, 8, rng);
    Matrix us = u, vs = v;
    for (int j = 0; j < 4; ++j) {
      us.row(j) *= scale(rng);
      vs.row(j) *= scale(rng);
    }
    const auto a = aligned_similarity(u, v, 0.05);
    const auto b = aligned_similarity(us, vs, 0.05);
    for (int j = 0; j < 4; ++j) {
      CHECK(std::abs(a.similarities[j] - b.similarities[j]) <= 1e-12);
      CHECK(std::abs(a.y_hat_vt[j] - b.y_hat_vt[j]) <= 1e-12);
    }
    CHECK(std::abs(alignment_loss(a.y_hat_vt, y) - alignment_loss(b.y_hat_vt, y)) <= 1e-12);
  }
}

TEST_CASE("alignment gradient has no cross-attribute coupling") {
  std::mt19937_64 rng(3);
  const Matrix v0 = random_matrix(4, 6, rng);
  ParameterStore store;
  Parameter& ft = store.add("ft", random_matrix(4, 6, rng));
  const ad::Var inv_tau = ad::constant(Matrix::Constant(1, 1, 10.0));
  auto grad_for = [&](const Matrix& f_v, const std::vector<std::uint8_t>& y) {
    store.zero_grad();
    ad::backward(alignment_loss_graph(ad::constant(f_v), ad::parameter(ft), inv_tau, y));
    return Matrix(ft.grad);
  };
  const Matrix g0 = grad_for(v0, {1, 0, 1, 0});
  Matrix v1 = v0;
  v1.row(2) = random_matrix(1, 6, rng);
  const Matrix g1 = grad_for(v1, {1, 0, 0, 0});
  for (int k : {0, 1, 3}) CHECK(testing::bit_equal(g0.row(k), g1.row(k)));
  CHECK_FALSE(testing::bit_equal(g0.row(2), g1.row(2)));
}

TEST_CASE("graph losses agree with the scalar forms") {
  std::mt19937_64 rng(4);
  const Matrix z = random_matrix(5, 1, rng, 3.0);
  const std::vector<std::uint8_t> y = {1, 0, 0, 1, 1};
  auto w = ImbalanceWeights::uniform(5);
  w.positive_weight = {1.1, 1.2, 1.3, 1.4, 1.5};
  w.negative_weight = {2.1, 2.2, 2.3, 2.4, 2.5};
  const std::vector<double> zs(z.data(), z.data() + 5);
  CHECK(prediction_loss_graph(ad::constant(z), y, w).scalar() ==
        doctest::Approx(prediction_loss(zs, y, w)).epsilon(1e-12));

  const Matrix u = random_matrix(5, 4, rng);
  const Matrix v = random_matrix(5, 4, rng);
  const auto out = aligned_similarity(u, v, 0.25);
  const double graph =
      alignment_loss_graph(ad::constant(u), ad::constant(v), ad::constant(Matrix::Constant(1, 1, 4.0)), y).scalar();
  CHECK(graph == doctest::Approx(alignment_loss(out.y_hat_vt, y)).epsilon(1e-12));

  const double weighted =
      alignment_loss_graph(ad::constant(u), ad::constant(v), ad::constant(Matrix::Constant(1, 1, 4.0)), y, &w)
          .scalar();
  double expected = 0.0;
  for (int j = 0; j < 5; ++j) {
    const double p = out.y_hat_vt[j];
    expected += w.weight(j, y[j]) * -(y[j] ? std::log(p) : std::log(1.0 - p));
  }
  CHECK(weighted == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(5);
  const std::vector<std::uint8_t> y = {1, 0, 1};
  ParameterStore store;
  Parameter& fv = store.add("fv", random_matrix(3, 4, rng));
  Parameter& ft = store.add("ft", random_matrix(3, 4, rng));
  Parameter& log_tau = store.add("log_tau", Matrix::Constant(1, 1, std::log(0.3)));
  auto loss = [&] {
    return alignment_loss_graph(ad::parameter(fv), ad::parameter(ft), ad::exp(ad::scale(ad::parameter(log_tau), -1.0)),
                                y);
  };
  store.zero_grad();
  ad::backward(loss());
  for (Parameter* p : {&fv, &ft, &log_tau}) {
    const Matrix analytic = p->grad;
    const auto r = testing::check_gradient(
        *p,
        [&] {
          ad::NoGradGuard guard;
          return loss().scalar();
        },
        analytic);
    CHECK_MESSAGE(r.relative_error < 1e-6, p->name);
    CHECK(std::isfinite(r.analytic_norm));
  }
}
