#include "span/kernels.hpp"

namespace span::kernels::scalar {

namespace {

template <class T>
T dot_impl(const T* a, const T* b, std::size_t n) noexcept {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void axpy_impl(T alpha, const T* x, T* y, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) noexcept { return dot_impl(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) noexcept { return dot_impl(a, b, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept { axpy_impl(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept { axpy_impl(alpha, x, y, n); }

}  // namespace span::kernels::scalar
