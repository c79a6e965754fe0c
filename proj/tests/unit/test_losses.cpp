#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "span/error.hpp"
#include "span/losses.hpp"

using namespace span;

TEST_CASE("hybrid loss on an empty mask is cross entropy") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(10);
    for (double& v : p) v = u(rng);
    const std::vector<std::uint8_t> mask(10, 0);
    for (double lambda : {0.0, 0.5, 0.75, 1.0}) {
      const LossSpec spec{LossKind::hybrid, lambda, 1.0, 3};
      CHECK(hybrid_loss(p, mask, spec) == binary_ce_loss(p, mask));
    }
  }
}

TEST_CASE("hybrid loss endpoints and perfect prediction") {
  const std::vector<double> p{0.9, 0.2, 0.7, 0.1};
  const std::vector<std::uint8_t> y{1, 0, 1, 0};
  CHECK(hybrid_loss(p, y, {LossKind::hybrid, 0.0, 1.0, 3}) == doctest::Approx(binary_ce_loss(p, y)));
  CHECK(hybrid_loss(p, y, {LossKind::hybrid, 1.0, 1.0, 3}) == doctest::Approx(dice_loss(p, y, 1.0)));
  const double mid = hybrid_loss(p, y, {LossKind::hybrid, 0.75, 1.0, 3});
  CHECK(mid == doctest::Approx(0.25 * binary_ce_loss(p, y) + 0.75 * dice_loss(p, y, 1.0)));

  const std::vector<double> perfect{1.0, 0.0, 1.0, 0.0};
  CHECK(binary_ce_loss(perfect, y) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(dice_loss(perfect, y, 1.0) == doctest::Approx(0.0));
  CHECK(hybrid_loss(perfect, y, LossSpec{LossKind::hybrid}) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("dice loss formula") {
  const std::vector<double> p{0.5, 0.5};
  const std::vector<std::uint8_t> y{1, 0};
  // 1 - (2 * 0.5 + 1) / (1 + 1 + 1)
  CHECK(dice_loss(p, y, 1.0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("default dice weight") { CHECK(LossSpec{}.lambda == 0.75); }

TEST_CASE("losses reject probabilities outside the unit interval") {
  const std::vector<std::uint8_t> y{1};
  CHECK_THROWS_AS(binary_ce_loss(std::vector<double>{1.5}, y), Error);
  CHECK_THROWS_AS(ce_loss(std::vector<double>{-0.1, 1.1}, 0), Error);
}

TEST_CASE("ce loss clamps at the floor") {
  CHECK(std::isfinite(ce_loss(std::vector<double>{0.0, 1.0}, 0)));
  CHECK(ce_loss(std::vector<double>{0.25, 0.75}, 1) == doctest::Approx(-std::log(0.75)));
}

TEST_CASE("survival NLL single-sample fixtures") {
  const Matrix<double> half(1, 3, 0.0);  // sigmoid(0) = 0.5
  CHECK(survival_nll_loss(half, std::vector<int>{0}, std::vector<int>{0}) == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(survival_nll_loss(half, std::vector<int>{0}, std::vector<int>{1}) == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(std::abs(survival_nll_loss(half, std::vector<int>{0}, std::vector<int>{0}) - std::log(2.0)) < 1e-12);
}

TEST_CASE("survival NLL stays finite at saturated hazards") {
  const Matrix<double> sat(1, 3, std::vector<double>{-800.0, 800.0, 800.0});
  CHECK(std::isfinite(survival_nll_loss(sat, std::vector<int>{0}, std::vector<int>{0})));
  CHECK(std::isfinite(survival_nll_loss(sat, std::vector<int>{2}, std::vector<int>{0})));
}

TEST_CASE("survival NLL decreases as the event-bin hazard rises") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int t = 0; t < 20; ++t) {
    Matrix<double> z(1, 3);
    for (double& v : z.storage()) v = n(rng);
    const int y = t % 3;
    const double before = survival_nll_loss(z, std::vector<int>{y}, std::vector<int>{0});
    z(0, static_cast<std::size_t>(y)) += 0.5;
    CHECK(survival_nll_loss(z, std::vector<int>{y}, std::vector<int>{0}) < before);
  }
}

TEST_CASE("survival NLL index error for censored samples past the bin range") {
  const Matrix<double> z(1, 3, 0.0);
  CHECK_NOTHROW(survival_nll_loss(z, std::vector<int>{2}, std::vector<int>{1}));
  CHECK_THROWS_AS(survival_nll_loss(z, std::vector<int>{3}, std::vector<int>{1}), Error);
  CHECK_THROWS_AS(survival_nll_loss(z, std::vector<int>{3}, std::vector<int>{0}), Error);
}

TEST_CASE("discretize_survival") {
  CHECK(discretize_survival(std::vector<double>{1, 2, 3}, std::vector<int>{1, 1, 1}, 3) == std::vector<int>{0, 1, 2});
  CHECK(discretize_survival(std::vector<double>{1, 2, 3, 50}, std::vector<int>{1, 1, 1, 0}, 3) ==
        std::vector<int>{0, 1, 2, 2});
  try {
    discretize_survival(std::vector<double>{4, 4, 4}, std::vector<int>{1, 1, 1}, 3);
    FAIL("expected DegenerateQuantiles");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateQuantiles);
  }
  CHECK_THROWS_AS(discretize_survival(std::vector<double>{1, 2, 3}, std::vector<int>{1, 0, 0}, 3), Error);
}

TEST_CASE("tape losses agree with the scalar versions") {
  Tape<double> tape;
  const Matrix<double> logits(3, 2, std::vector<double>{0.2, -0.4, 1.0, 0.5, -2.0, 0.3});
  const std::vector<std::uint8_t> mask{0, 1, 1};
  const NodeId z = tape.constant(logits);
  const LossSpec spec{LossKind::hybrid, 0.75, 1.0, 3};
  const double got = tape.value(ops::hybrid_segmentation_loss(tape, z, mask, spec))(0, 0);
  std::vector<double> fg;
  for (std::size_t i = 0; i < 3; ++i) fg.push_back(1.0 / (1.0 + std::exp(logits(i, 0) - logits(i, 1))));
  CHECK(got == doctest::Approx(hybrid_loss(fg, mask, spec)).epsilon(1e-12));

  const std::vector<int> labels{1, 0, 1};
  const double ce = tape.value(ops::softmax_cross_entropy(tape, z, labels))(0, 0);
  double expect = 0.0;
  for (std::size_t i = 0; i < 3; ++i) expect += -std::log(labels[i] == 1 ? fg[i] : 1.0 - fg[i]);
  CHECK(ce == doctest::Approx(expect / 3.0).epsilon(1e-12));

  const Matrix<double> hz(1, 3, 0.0);
  CHECK(tape.value(ops::survival_nll(tape, tape.constant(hz), std::vector<int>{0}, std::vector<int>{1}))(0, 0) ==
        doctest::Approx(std::log(2.0)));
}
