#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "span/conv.hpp"
#include "span/error.hpp"
#include "span/oracles.hpp"

using namespace span;

namespace {

ConvSpec spec(int k, int s, int d, std::size_t in = 1, std::size_t out = 1) {
  ConvSpec c;
  c.kernel = k;
  c.stride = s;
  c.dilation = d;
  c.in_dim = in;
  c.out_dim = out;
  return c;
}

struct OwnedParams {
  std::vector<double> w, b;
  std::size_t in = 0, out = 0;
  ConvParams<double> view() const { return {w, b, in, out}; }
};

OwnedParams random_params(std::mt19937_64& rng, int k, std::size_t in, std::size_t out) {
  OwnedParams p;
  p.in = in;
  p.out = out;
  std::normal_distribution<double> n;
  p.w.resize(static_cast<std::size_t>(k * k) * in * out);
  p.b.resize(out);
  for (double& v : p.w) v = n(rng);
  for (double& v : p.b) v = n(rng);
  return p;
}

}  // namespace

TEST_CASE("compute_output_coords examples") {
  const std::vector<Coord> a{{0, 0}, {4, 7}};
  CHECK(compute_output_coords(a, spec(1, 1, 1)) == a);
  const std::vector<Coord> b{{0, 0}, {1, 1}, {5, 3}};
  CHECK(compute_output_coords(b, spec(2, 2, 1)) == std::vector<Coord>{{0, 0}, {2, 1}});
  // (2,2) also reaches (0,2) and (2,0) through the mixed offsets (0,1) and (1,0).
  const std::vector<Coord> c{{0, 0}, {2, 2}};
  CHECK(compute_output_coords(c, spec(2, 1, 2)) == std::vector<Coord>{{0, 0}, {2, 0}, {0, 2}, {2, 2}});
  CHECK(compute_output_coords(std::vector<Coord>{}, spec(2, 2, 1)).empty());
}

TEST_CASE("identity rulebook") {
  std::mt19937_64 rng(1);
  const auto coords = test::random_coords(rng, 10, 30);
  const auto m = build_sparse_map(coords, Matrix<float>(coords.size(), 1));
  const auto rb = build_conv_rulebook(m.coords, spec(1, 1, 1));
  REQUIRE(rb.num_offsets() == 1);
  REQUIRE(rb.pairs[0].size() == m.size());
  for (std::uint32_t i = 0; i < m.size(); ++i) CHECK(rb.pairs[0][i] == RulePair{i, i});
}

TEST_CASE("K=2 S=2 rulebook pairs") {
  const std::vector<Coord> in{{0, 0}, {1, 1}, {5, 3}};
  const auto rb = build_conv_rulebook(in, spec(2, 2, 1));
  REQUIRE(rb.num_offsets() == 4);
  CHECK(rb.pairs[0] == std::vector<RulePair>{{0, 0}});
  CHECK(rb.pairs[1].empty());
  CHECK(rb.pairs[2].empty());
  CHECK(rb.pairs[3] == std::vector<RulePair>{{1, 0}, {2, 1}});
}

TEST_CASE("K=2 S=1 D=2 rulebook pairs") {
  const std::vector<Coord> in{{0, 0}, {2, 2}};
  const auto rb = build_conv_rulebook(in, spec(2, 1, 2));
  CHECK(rb.out_coords == std::vector<Coord>{{0, 0}, {2, 0}, {0, 2}, {2, 2}});
  CHECK(rb.pairs[0] == std::vector<RulePair>{{0, 0}, {1, 3}});
  CHECK(rb.pairs[1] == std::vector<RulePair>{{1, 2}});
  CHECK(rb.pairs[2] == std::vector<RulePair>{{1, 1}});
  CHECK(rb.pairs[3] == std::vector<RulePair>{{1, 0}});
  CHECK(same_pairs(rb, brute_force_conv_rulebook(in, spec(2, 1, 2))));
}

TEST_CASE("downsampling rulebook uses every input exactly once") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto coords = test::random_coords(rng, 20, 150);
    const auto m = build_sparse_map(coords, Matrix<float>(coords.size(), 1));
    for (const auto& [k, d] : {std::pair{2, 1}, std::pair{3, 1}, std::pair{2, 2}}) {
      const auto rb = build_conv_rulebook(m.coords, spec(k, k * d, d));
      std::vector<int> uses(m.size(), 0);
      for (const auto& list : rb.pairs)
        for (const auto& p : list) ++uses[p.in];
      // With D > 1 inputs off the dilation lattice have no pair at all.
      for (std::size_t i = 0; i < uses.size(); ++i) {
        const bool on_lattice = m.coords[i].x % d == 0 && m.coords[i].y % d == 0;
        CHECK(uses[i] == (on_lattice ? 1 : 0));
      }
    }
  }
}

TEST_CASE("rulebook pairs satisfy the anchor rule and are sorted") {
  std::mt19937_64 rng(8);
  const auto coords = test::random_coords(rng, 16, 90);
  const auto m = build_sparse_map(coords, Matrix<float>(coords.size(), 1));
  for (int k = 1; k <= 3; ++k)
    for (int s = 1; s <= 2; ++s)
      for (int d = 1; d <= 2; ++d) {
        const auto rb = build_conv_rulebook(m.coords, spec(k, s, d));
        CHECK(is_canonical(rb.out_coords));
        for (std::size_t off = 0; off < rb.pairs.size(); ++off) {
          const auto ko = kernel_offset(static_cast<int>(off), k);
          for (std::size_t i = 0; i < rb.pairs[off].size(); ++i) {
            const auto& p = rb.pairs[off][i];
            const Coord pi = m.coords[p.in], po = rb.out_coords[p.out];
            CHECK(pi.x == s * po.x + d * ko.kx);
            CHECK(pi.y == s * po.y + d * ko.ky);
            if (i > 0) {
              const auto& q = rb.pairs[off][i - 1];
              CHECK((q.out < p.out || (q.out == p.out && q.in < p.in)));
            }
          }
        }
      }
}

TEST_CASE("transpose_rulebook") {
  const std::vector<Coord> in{{0, 0}, {1, 1}, {5, 3}};
  const auto rb = build_conv_rulebook(in, spec(2, 2, 1));
  const auto tr = transpose_rulebook(rb, in);
  CHECK(tr.kind == ConvKind::transposed);
  CHECK(tr.out_coords == in);
  CHECK(tr.n_out() == rb.n_in());
  CHECK(tr.n_in() == rb.n_out());
  std::vector<std::uint32_t> from_origin;
  for (const auto& list : tr.pairs)
    for (const auto& p : list)
      if (p.in == 0) from_origin.push_back(p.out);
  std::sort(from_origin.begin(), from_origin.end());
  CHECK(from_origin == std::vector<std::uint32_t>{0, 1});
  CHECK(transpose_rulebook(tr) == rb);
}

TEST_CASE("transpose involution on random rulebooks") {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const auto coords = test::random_coords(rng, 14, 60);
    const auto m = build_sparse_map(coords, Matrix<float>(coords.size(), 1));
    const auto rb = build_conv_rulebook(m.coords, spec(2 + t % 2, 2, 1));
    CHECK(transpose_rulebook(transpose_rulebook(rb, m.coords)) == rb);
  }
}

TEST_CASE("sac_forward identity") {
  std::mt19937_64 rng(2);
  const auto m = test::random_map<double>(rng, 8, 20, 3);
  std::vector<double> w(9, 0.0), b(3, 0.0);
  for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(1, 1, 1, 3, 3)), ConvParams<double>{w, b, 3, 3});
  CHECK(out == m);
}

TEST_CASE("sac_forward sums through the rulebook") {
  const auto m = build_sparse_map<double>({{0, 0}, {1, 1}}, Matrix<double>(2, 1, std::vector<double>{2, 3}));
  std::vector<double> w(4, 1.0), b(1, 0.0);
  const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(2, 2, 1)), ConvParams<double>{w, b, 1, 1});
  REQUIRE(out.size() == 1);
  CHECK(out.coords[0] == Coord{0, 0});
  CHECK(out.features(0, 0) == 5.0);
}

TEST_CASE("sac_forward bias only") {
  std::mt19937_64 rng(6);
  const auto m = test::random_map<double>(rng, 9, 30, 2);
  std::vector<double> w(4 * 2 * 3, 0.0), b{0.5, -1.0, 2.0};
  const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(2, 1, 1, 2, 3)), ConvParams<double>{w, b, 2, 3});
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(out.features(i, c) == b[c]);
}

TEST_CASE("sac_forward errors") {
  std::mt19937_64 rng(6);
  const auto m = test::random_map<double>(rng, 9, 30, 2);
  const auto other = test::random_map<double>(rng, 9, 10, 2);
  std::vector<double> w(4 * 2 * 3, 0.0), b(3, 0.0);
  const ConvParams<double> p{w, b, 2, 3};
  const auto rb_other = build_conv_rulebook(other.coords, spec(2, 1, 1, 2, 3));
  CHECK_THROWS_AS(sac_forward(m, rb_other, p), Error);
  const ConvParams<double> wrong{w, b, 3, 2};
  const auto rb = build_conv_rulebook(m.coords, spec(2, 1, 1, 3, 2));
  CHECK_THROWS_AS(sac_forward(m, rb, wrong), Error);
}

TEST_CASE("context rule") {
  std::mt19937_64 rng(7);
  auto m = test::random_map<double>(rng, 6, 10, 2, 1);
  m.context(0, 0) = 1.5;
  m.context(0, 1) = -2.0;
  SUBCASE("equal dims pass through") {
    const auto p = random_params(rng, 2, 2, 2);
    const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(2, 2, 1, 2, 2)), p.view());
    CHECK(out.context == m.context);
  }
  SUBCASE("dim change maps by the mean kernel") {
    const auto p = random_params(rng, 2, 2, 3);
    const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(2, 2, 1, 2, 3)), p.view());
    REQUIRE(out.num_ctx() == 1);
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < 2; ++i) acc += p.w[(k * 3 + o) * 2 + i] * m.context(0, i);
      CHECK(out.context(0, o) == doctest::Approx(acc / 4.0 + p.b[o]).epsilon(1e-12));
    }
  }
}

TEST_CASE("sac_backward identity and zero gradient") {
  std::mt19937_64 rng(9);
  const auto m = test::random_map<double>(rng, 7, 12, 2);
  std::vector<double> w{1, 0, 0, 1}, b{0, 0};
  const ConvParams<double> p{w, b, 2, 2};
  const auto rb = build_conv_rulebook(m.coords, spec(1, 1, 1, 2, 2));
  const auto g = test::random_matrix<double>(rng, m.size(), 2);
  const auto grads = sac_backward(g, m, rb, p);
  CHECK(grads.grad_features == g);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 2; ++i) {
      double acc = 0.0;
      for (std::size_t r = 0; r < m.size(); ++r) acc += g(r, o) * m.features(r, i);
      CHECK(grads.grad_weight(o, i) == doctest::Approx(acc).epsilon(1e-12));
    }
  const auto zero = sac_backward(Matrix<double>(m.size(), 2), m, rb, p);
  for (double v : zero.grad_features.storage()) CHECK(v == 0.0);
  for (double v : zero.grad_weight.storage()) CHECK(v == 0.0);
  for (double v : zero.grad_bias) CHECK(v == 0.0);
}

TEST_CASE("sac_backward matches finite differences of a linear functional") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = test::random_map<double>(rng, 8, 20, 3, 1);
    m.context = test::random_matrix<double>(rng, 1, 3);
    const auto p = random_params(rng, 2, 3, 4);
    const auto rb = build_conv_rulebook(m.coords, spec(2, 1, 1, 3, 4));
    const auto out = sac_forward(m, rb, p.view());
    const auto r = test::random_matrix<double>(rng, out.size() + 1, 4);
    auto objective = [&](const SparseMap<double>& in, const OwnedParams& q) {
      const auto o = sac_forward(in, rb, q.view());
      double s = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i)
        for (std::size_t c = 0; c < 4; ++c) s += r(i, c) * o.features(i, c);
      for (std::size_t c = 0; c < 4; ++c) s += r(o.size(), c) * o.context(0, c);
      return s;
    };
    const auto grads = sac_backward(r, m, rb, p.view());
    const double eps = 1e-6;
    for (std::size_t j = 0; j < p.w.size(); j += 5) {
      OwnedParams hi = p, lo = p;
      hi.w[j] += eps;
      lo.w[j] -= eps;
      CHECK(grads.grad_weight.storage()[j] ==
            doctest::Approx((objective(m, hi) - objective(m, lo)) / (2 * eps)).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < m.size(); i += 3) {
      auto hi = m, lo = m;
      hi.features(i, 1) += eps;
      lo.features(i, 1) -= eps;
      CHECK(grads.grad_features(i, 1) ==
            doctest::Approx((objective(hi, p) - objective(lo, p)) / (2 * eps)).epsilon(1e-6));
    }
    auto hi = m, lo = m;
    hi.context(0, 2) += eps;
    lo.context(0, 2) -= eps;
    CHECK(grads.grad_context(0, 2) ==
          doctest::Approx((objective(hi, p) - objective(lo, p)) / (2 * eps)).epsilon(1e-6));
  }
}

TEST_CASE("sac_forward agrees with the dense oracle") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 1 + trial % 3, s = 1 + (trial / 3) % 2, d = 1 + (trial / 6) % 2;
    const auto m = test::random_map<double>(rng, 12, 50, 3);
    const auto p = random_params(rng, k, 3, 2);
    const auto rb = build_conv_rulebook(m.coords, spec(k, s, d, 3, 2));
    const auto out = sac_forward(m, rb, p.view());
    const std::size_t side = 12 + static_cast<std::size_t>((k - 1) * d);
    const auto dense = dense_conv_oracle(embed_dense(m, side, side), k, s, d, p.view());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto c = out.coords[i];
      if (static_cast<std::size_t>(c.y) >= dense.height || static_cast<std::size_t>(c.x) >= dense.width) continue;
      for (std::size_t o = 0; o < 2; ++o)
        CHECK(std::abs(out.features(i, o) - dense.at(c.y, c.x, o)) < 1e-10);
    }
  }
}

TEST_CASE("token reduction on full grids") {
  for (int m = 1; m <= 6; ++m) {
    const int side = 1 << m;
    const auto map = test::full_map<float>(side, 1);
    const auto rb = build_conv_rulebook(map.coords, spec(2, 2, 1));
    CHECK(rb.n_out() * 4 == rb.n_in());
  }
}

TEST_CASE("translation equivariance") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = test::random_map<double>(rng, 10, 40, 2);
    const auto p = random_params(rng, 2, 2, 3);
    const auto out = sac_forward(m, build_conv_rulebook(m.coords, spec(2, 2, 1, 2, 3)), p.view());
    const int tx = 3, ty = 5;
    std::vector<Coord> moved;
    for (const auto& c : m.coords) moved.push_back({c.x + 2 * tx, c.y + 2 * ty});
    const auto m2 = build_sparse_map(moved, m.features);
    const auto out2 = sac_forward(m2, build_conv_rulebook(m2.coords, spec(2, 2, 1, 2, 3)), p.view());
    REQUIRE(out2.size() == out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out2.coords[i] == Coord{out.coords[i].x + tx, out.coords[i].y + ty});
    }
    CHECK(out2.features == out.features);
  }
}

TEST_CASE("permutation invariance") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = test::random_map<double>(rng, 10, 40, 2);
    const auto [c, f] = test::shuffled(m, rng);
    const auto m2 = build_sparse_map(c, f);
    const auto p = random_params(rng, 3, 2, 2);
    const auto s = spec(3, 1, 1, 2, 2);
    CHECK(sac_forward(m, build_conv_rulebook(m.coords, s), p.view()) ==
          sac_forward(m2, build_conv_rulebook(m2.coords, s), p.view()));
  }
}

TEST_CASE("invalid conv specs") {
  CHECK_THROWS_AS(validate(spec(0, 1, 1)), Error);
  CHECK_THROWS_AS(validate(spec(1, 0, 1)), Error);
  CHECK_THROWS_AS(validate(spec(1, 1, 0)), Error);
}
