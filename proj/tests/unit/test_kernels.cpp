#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "span/error.hpp"
#include "span/kernels.hpp"

using namespace span;

namespace {

template <class T>
std::vector<T> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d;
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(d(rng));
  return v;
}

}  // namespace

TEST_CASE_TEMPLATE("avx2 dot and axpy agree with scalar", T, float, double) {
  if (!kernels::isa_supported(kernels::Isa::avx2)) return;
  std::mt19937_64 rng(1);
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 64u, 100u, 257u}) {
    const auto a = random_vec<T>(rng, n), b = random_vec<T>(rng, n);
    const double s = kernels::scalar::dot(a.data(), b.data(), n);
    const double v = kernels::avx2::dot(a.data(), b.data(), n);
    double mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mag += std::abs(static_cast<double>(a[i]) * b[i]);
    CHECK(std::abs(s - v) <= tol * (1.0 + mag));

    auto y1 = random_vec<T>(rng, n);
    auto y2 = y1;
    const T alpha = static_cast<T>(0.37);
    kernels::scalar::axpy(alpha, a.data(), y1.data(), n);
    kernels::avx2::axpy(alpha, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(static_cast<double>(y1[i]) - y2[i]) <= tol * 4);
  }
}

TEST_CASE("isa selection") {
  CHECK(kernels::isa_supported(kernels::Isa::scalar));
  const auto before = kernels::active_isa();
  kernels::set_isa(kernels::Isa::scalar);
  CHECK(kernels::active_isa() == kernels::Isa::scalar);
  const float a[3] = {1, 2, 3}, b[3] = {4, 5, 6};
  CHECK(kernels::dot(a, b, 3) == 32.0f);
  if (!kernels::isa_supported(kernels::Isa::avx2)) CHECK_THROWS_AS(kernels::set_isa(kernels::Isa::avx2), Error);
  kernels::set_isa(before);
  CHECK(kernels::to_string(kernels::Isa::scalar) == "scalar");
  CHECK(kernels::to_string(kernels::Isa::avx2) == "avx2");
}

TEST_CASE("gemv helpers") {
  const double a[6] = {1, 2, 3, 4, 5, 6};  // 2 x 3
  const double x[3] = {1, 0, -1};
  double y[2] = {10, 20};
  kernels::gemv_acc(a, 2, 3, x, y);
  CHECK(y[0] == 8.0);
  CHECK(y[1] == 18.0);
  const double g[2] = {1, 2};
  double xt[3] = {0, 0, 0};
  kernels::gemv_t_acc(a, 2, 3, g, xt);
  CHECK(xt[0] == 9.0);
  CHECK(xt[1] == 12.0);
  CHECK(xt[2] == 15.0);
  double m[6] = {0, 0, 0, 0, 0, 0};
  kernels::ger_acc(m, 2, 3, g, x);
  CHECK(m[0] == 1.0);
  CHECK(m[2] == -1.0);
  CHECK(m[5] == -2.0);
}
