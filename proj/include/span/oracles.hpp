#pragma once

// Brute-force references for the fast paths. Nothing here shares index
// arithmetic with conv.cpp or attention.cpp.

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "span/attention.hpp"
#include "span/conv.hpp"
#include "span/matrix.hpp"
#include "span/sparse_map.hpp"

namespace span {

inline constexpr std::size_t kBruteForceMaxTokens = 500;

// H x W x d, zero at inactive sites.
template <class T>
struct DenseTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t depth = 0;
  std::vector<T> data;

  DenseTensor() = default;
  DenseTensor(std::size_t h, std::size_t w, std::size_t d) : height(h), width(w), depth(d), data(h * w * d, T(0)) {}
  T& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * depth + c]; }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * depth + c]; }
  std::size_t bytes() const noexcept { return data.size() * sizeof(T); }
};

template <class T>
DenseTensor<T> embed_dense(const SparseMap<T>& map, std::size_t height, std::size_t width);

// Valid padding; output side floor((H - (K-1) D - 1) / S) + 1. Weight layout as ConvParams.
template <class T>
DenseTensor<T> dense_conv_oracle(const DenseTensor<T>& in, int kernel, int stride, int dilation,
                                 const ConvParams<T>& params);

// Boolean (N + num_ctx)^2 masks, row = query.
struct AttentionMasks {
  std::size_t rows = 0;
  std::vector<std::uint8_t> local;
  std::vector<std::uint8_t> global;
};

template <class T>
Matrix<T> dense_attention_oracle(const Matrix<T>& h, std::span<const Coord> coords, const AttentionMasks& masks,
                                 const AttentionParams<T>& params, int window_side);

using PairSet = std::set<std::pair<std::uint32_t, std::uint32_t>>;

struct BruteConvRulebook {
  std::vector<Coord> out_coords;  // canonical order
  std::vector<PairSet> pairs;     // per kernel offset, (in, out)
};

BruteConvRulebook brute_force_conv_rulebook(std::span<const Coord> coords, const ConvSpec& spec);

struct BruteAttnRulebook {
  PairSet local;   // (query, key)
  PairSet global;  // (query, key)
  std::size_t n_tokens = 0;
  std::size_t num_ctx = 0;
};

BruteAttnRulebook brute_force_attn_rulebook(std::span<const Coord> coords, int window_side, Shift shift,
                                            std::size_t num_ctx);

AttentionMasks masks_from(const BruteAttnRulebook& rb);

bool same_pairs(const ConvRulebook& fast, const BruteConvRulebook& brute);
bool same_pairs(const AttnRulebook& fast, const BruteAttnRulebook& brute);

// Check suite shared by the CLI and the acceptance runner.
enum class Fault { none, conv, attention, rulebook, gradient };

Fault parse_fault(const std::string& name);

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t trials = 0;
  bool passed = true;
  double seconds = 0.0;
  std::string detail;
};

// Random instances on grids up to 32 x 32; errors are max abs over active output sites.
CheckResult check_conv_oracle(std::size_t trials, std::uint64_t seed, bool single_precision, Fault fault = Fault::none);
CheckResult check_attention_oracle(std::size_t trials, std::uint64_t seed, Fault fault = Fault::none);
CheckResult check_conv_rulebooks(std::size_t trials, std::uint64_t seed, Fault fault = Fault::none);
CheckResult check_attention_rulebooks(std::size_t trials, std::uint64_t seed, Fault fault = Fault::none);
// One result per differentiable op plus the MIL and UNet composites, double precision.
std::vector<CheckResult> check_gradients(std::uint64_t seed, Fault fault = Fault::none);

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed, std::size_t trials, Fault fault = Fault::none);

}  // namespace span
