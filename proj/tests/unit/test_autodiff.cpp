#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "span/autodiff.hpp"
#include "span/error.hpp"
#include "span/nn.hpp"

using namespace span;

namespace {

// 0.5 * sum(p^2) via a product of p with itself.
NodeId half_square(Tape<double>& tape, Param<double>& p) {
  const NodeId x = ops::add_param_rows(tape, tape.constant(Matrix<double>(p.value.rows(), p.value.cols())), 0, p);
  const Matrix<double>& v = tape.value(x);
  double s = 0.0;
  for (double e : v.storage()) s += 0.5 * e * e;
  return tape.record(Matrix<double>(1, 1, s), [x, self = tape.size()](Tape<double>& t) {
    const double g = t.grad(self)(0, 0);
    Matrix<double>& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx.storage()[i] += g * t.value(x).storage()[i];
  });
}

}  // namespace

TEST_CASE("quadratic loss gradient equals the parameter") {
  ParamStore<double> store;
  Param<double>& p = store.add("p", 2, 3);
  p.value = Matrix<double>(2, 3, std::vector<double>{1, -2, 3, 0.5, 0, -1});
  Tape<double> tape;
  tape.backward(half_square(tape, p));
  CHECK(p.grad == p.value);
}

TEST_CASE("two uses accumulate and repeated backward doubles") {
  ParamStore<double> store;
  Param<double>& p = store.add("p", 1, 2);
  p.value = Matrix<double>(1, 2, std::vector<double>{2, 3});
  {
    Tape<double> tape;
    const NodeId a = ops::add_param_rows(tape, tape.constant(Matrix<double>(1, 2)), 0, p);
    const NodeId b = ops::add_param_rows(tape, a, 0, p);  // 2p
    const NodeId s = ops::sum_rows(tape, b, 0, 1);
    Param<double>& ones = store.add("ones", 1, 2);
    ones.value.fill(1.0);
    ones.frozen = true;
    const NodeId loss = ops::linear(tape, s, ones, static_cast<Param<double>*>(nullptr));
    tape.backward(loss);
    CHECK(p.grad(0, 0) == 2.0);
    CHECK(p.grad(0, 1) == 2.0);
    tape.backward(loss);
    CHECK(p.grad(0, 0) == 4.0);
  }
  store.zero_grad();
  CHECK(p.grad(0, 0) == 0.0);
}

TEST_CASE("backward on an empty tape throws") {
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(0), Error);
}

TEST_CASE("duplicate parameter names are rejected") {
  ParamStore<float> store;
  store.add("w", 1, 1);
  CHECK_THROWS_AS(store.add("w", 2, 2), Error);
  CHECK(store.num_scalars() == 1);
}

TEST_CASE("grad_check on a linear layer") {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  Param<double>& w = store.add("w", 4, 3);
  Param<double>& b = store.add("b", 1, 4);
  Param<double>& r = store.add("r", 1, 4);
  r.frozen = true;
  for (auto* p : {&w, &b, &r}) p->value = test::random_matrix<double>(rng, p->value.rows(), p->value.cols());
  const Matrix<double> x = test::random_matrix<double>(rng, 5, 3);
  LossFn<double> fn = [&](Tape<double>& t) {
    const NodeId y = ops::linear(t, t.constant(x), w, &b);
    return ops::linear(t, ops::sum_rows(t, y, 0, 5), r, static_cast<Param<double>*>(nullptr));
  };
  CHECK(grad_check(fn, store).max_rel_error < 1e-9);
  CHECK(grad_check(fn, store, 1e-3, 200, 0, FiniteDifference::ridders).max_rel_error < 1e-9);
}

TEST_CASE("grad_check catches a corrupted backward") {
  std::mt19937_64 rng(4);
  ParamStore<double> store;
  Param<double>& w = store.add("w", 1, 2);
  w.value = test::random_matrix<double>(rng, 1, 2);
  LossFn<double> fn = [&](Tape<double>& t) {
    const NodeId y = ops::add_param_rows(t, t.constant(Matrix<double>(1, 2)), 0, w);
    const double v = t.value(y)(0, 0) * t.value(y)(0, 0) + t.value(y)(0, 1);
    return t.record(Matrix<double>(1, 1, v), [y, self = t.size()](Tape<double>& tt) {
      const double g = tt.grad(self)(0, 0);
      tt.grad(y)(0, 0) += g * 3.0 * tt.value(y)(0, 0);  // should be 2x
      tt.grad(y)(0, 1) += g;
    });
  };
  const auto rep = grad_check(fn, store);
  CHECK(rep.max_rel_error > 1e-2);
  CHECK(rep.worst_param == "w");
}

TEST_CASE("grad_check samples at most the requested coordinates") {
  ParamStore<double> store;
  Param<double>& w = store.add("w", 30, 30);
  Param<double>& r = store.add("r", 1, 30);
  r.frozen = true;
  r.value.fill(1.0);
  LossFn<double> scalar = [&](Tape<double>& t) {
    const NodeId s = ops::sum_rows(t, ops::add_param_rows(t, t.constant(Matrix<double>(30, 30)), 0, w), 0, 30);
    return ops::linear(t, s, r, static_cast<Param<double>*>(nullptr));
  };
  const auto rep = grad_check(scalar, store, 1e-4, 200, 1);
  CHECK(rep.coords_checked == 200);
  CHECK(rep.max_rel_error < 1e-9);
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  ParamStore<double> store;
  Param<double>& p = store.add("p", 1, 4);
  p.grad = Matrix<double>(1, 4, std::vector<double>{1e-3, -5.0, 200.0, 0.0});
  AdamConfig cfg;
  cfg.lr = 0.01;
  adam_step(store, cfg, 1);
  CHECK(p.value(0, 0) == doctest::Approx(-0.01).epsilon(1e-4));
  CHECK(p.value(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
  CHECK(p.value(0, 2) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p.value(0, 3) == 0.0);
}

TEST_CASE("adam skips frozen parameters and is deterministic") {
  auto run = [] {
    ParamStore<float> store;
    Param<float>& a = store.add("a", 1, 2);
    Param<float>& b = store.add("b", 1, 2);
    b.frozen = true;
    for (std::int64_t t = 1; t <= 5; ++t) {
      a.grad = Matrix<float>(1, 2, std::vector<float>{0.5f * static_cast<float>(t), -1.0f});
      b.grad = a.grad;
      adam_step(store, AdamConfig{}, t);
    }
    CHECK(b.value(0, 0) == 0.0f);
    return a.value;
  };
  CHECK(run() == run());
  ParamStore<float> store;
  CHECK_THROWS_AS(adam_step(store, AdamConfig{}, 0), Error);
}

TEST_CASE("copy_values_from casts between precisions") {
  ParamStore<double> d;
  d.add("w", 1, 2).value = Matrix<double>(1, 2, std::vector<double>{0.25, -3.0});
  ParamStore<float> f;
  f.add("w", 1, 2);
  f.copy_values_from(d);
  CHECK(f.get("w").value(0, 1) == -3.0f);
}
