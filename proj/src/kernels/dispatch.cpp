#include <atomic>
#include <cstdlib>
#include <cstring>

#include "span/error.hpp"
#include "span/kernels.hpp"

namespace span::kernels {

namespace {

struct Table {
  float (*sdot)(const float*, const float*, std::size_t) noexcept;
  double (*ddot)(const double*, const double*, std::size_t) noexcept;
  void (*saxpy)(float, const float*, float*, std::size_t) noexcept;
  void (*daxpy)(double, const double*, double*, std::size_t) noexcept;
};

constexpr Table kScalar{&scalar::dot, &scalar::dot, &scalar::axpy, &scalar::axpy};
constexpr Table kAvx2{&avx2::dot, &avx2::dot, &avx2::axpy, &avx2::axpy};

bool cpu_has_avx2() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() noexcept {
  const char* env = std::getenv("SPAN_ISA");
  if (env != nullptr && std::strcmp(env, "scalar") == 0) return Isa::scalar;
  return isa_supported(Isa::avx2) ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

const Table& table() noexcept {
  return current().load(std::memory_order_relaxed) == Isa::avx2 ? kAvx2 : kScalar;
}

}  // namespace

std::string_view to_string(Isa isa) noexcept { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) noexcept {
  if (isa == Isa::scalar) return true;
  static const bool avx2 = avx2::compiled() && cpu_has_avx2();
  return avx2;
}

Isa active_isa() noexcept { return current().load(); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw Error(ErrorCode::InvalidArgument, std::string("ISA not supported: ") + std::string(to_string(isa)));
  current().store(isa);
}

float dot(const float* a, const float* b, std::size_t n) noexcept { return table().sdot(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) noexcept { return table().ddot(a, b, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) noexcept { table().saxpy(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept { table().daxpy(alpha, x, y, n); }

}  // namespace span::kernels
