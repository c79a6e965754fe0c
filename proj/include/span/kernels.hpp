#pragma once

// Inner-loop arithmetic shared by the conv, attention and dense-layer code.
// Each primitive has a scalar reference implementation and an AVX2/FMA variant;
// the active variant is chosen once at startup from CPUID and can be pinned
// with set_isa() or the SPAN_ISA environment variable ("scalar" | "avx2").

#include <cstddef>
#include <string_view>

namespace span::kernels {

enum class Isa { scalar, avx2 };

std::string_view to_string(Isa isa) noexcept;
bool isa_supported(Isa isa) noexcept;
Isa active_isa() noexcept;
// Throws span::Error(InvalidArgument) if the ISA is not available on this CPU.
void set_isa(Isa isa);

// Per-ISA entry points. Exposed so the equivalence tests can call both sides.
namespace scalar {
float dot(const float* a, const float* b, std::size_t n) noexcept;
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
}  // namespace scalar

namespace avx2 {
bool compiled() noexcept;
float dot(const float* a, const float* b, std::size_t n) noexcept;
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
}  // namespace avx2

float dot(const float* a, const float* b, std::size_t n) noexcept;
double dot(const double* a, const double* b, std::size_t n) noexcept;
// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;

// y[r] += <A[r,:], x> for a row-major rows x cols matrix A.
template <class T>
void gemv_acc(const T* a, std::size_t rows, std::size_t cols, const T* x, T* y) noexcept {
  for (std::size_t r = 0; r < rows; ++r) y[r] += dot(a + r * cols, x, cols);
}

// x += A^T g
template <class T>
void gemv_t_acc(const T* a, std::size_t rows, std::size_t cols, const T* g, T* x) noexcept {
  for (std::size_t r = 0; r < rows; ++r)
    if (g[r] != T(0)) axpy(g[r], a + r * cols, x, cols);
}

// A[r,:] += g[r] * x
template <class T>
void ger_acc(T* a, std::size_t rows, std::size_t cols, const T* g, const T* x) noexcept {
  for (std::size_t r = 0; r < rows; ++r)
    if (g[r] != T(0)) axpy(g[r], x, a + r * cols, cols);
}

}  // namespace span::kernels
