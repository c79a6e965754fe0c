#pragma once

// Rulebook sparse convolution (the SAC operator).
//
// Anchor convention: input p_in contributes to output p_out through kernel
// offset k iff p_in = S * p_out + D * k component-wise, k in {0..K-1}^2.
// Outputs with a negative component are dropped (valid padding at the origin).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "span/matrix.hpp"
#include "span/sparse_map.hpp"

namespace span {

enum class ConvKind { forward, transposed };

struct ConvSpec {
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  ConvKind kind = ConvKind::forward;
};

void validate(const ConvSpec& spec);

struct KernelOffset {
  int kx = 0;
  int ky = 0;
};

// Offset index k <-> (kx, ky) in row-major order: k = ky * K + kx.
inline KernelOffset kernel_offset(int k, int kernel) noexcept { return {k % kernel, k / kernel}; }

struct RulePair {
  std::uint32_t in = 0;
  std::uint32_t out = 0;
  friend bool operator==(const RulePair&, const RulePair&) = default;
};

struct ConvRulebook {
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  ConvKind kind = ConvKind::forward;
  std::vector<Coord> in_coords;
  std::vector<Coord> out_coords;
  // One list per kernel offset, each sorted by (out, in).
  std::vector<std::vector<RulePair>> pairs;

  std::size_t n_in() const noexcept { return in_coords.size(); }
  std::size_t n_out() const noexcept { return out_coords.size(); }
  std::size_t num_offsets() const noexcept { return pairs.size(); }
  std::size_t total_pairs() const noexcept;

  friend bool operator==(const ConvRulebook&, const ConvRulebook&) = default;
};

std::vector<Coord> compute_output_coords(std::span<const Coord> coords_in, const ConvSpec& spec);
ConvRulebook build_conv_rulebook(std::span<const Coord> coords_in, const ConvSpec& spec);

// Swaps the roles of every pair; the result's out_coords are original_in_coords.
ConvRulebook transpose_rulebook(const ConvRulebook& rb, std::span<const Coord> original_in_coords);
ConvRulebook transpose_rulebook(const ConvRulebook& rb);

// Non-owning view of one SAC layer's parameters.
// weight holds K^2 blocks of out_dim x in_dim, in kernel-offset order.
template <class T>
struct ConvParams {
  std::span<const T> weight;
  std::span<const T> bias;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;

  std::size_t num_offsets() const noexcept { return weight.size() / (in_dim * out_dim); }
  const T* offset_weight(std::size_t k) const noexcept { return weight.data() + k * in_dim * out_dim; }
};

template <class T>
struct ConvGrads {
  std::span<T> weight;
  std::span<T> bias;
};

// Row-level kernels. Rows [0, n_in) are patch tokens, the trailing num_ctx rows
// are context tokens handled by the context rule: when in_dim != out_dim they
// are mapped by mean_k W(k) h + b, otherwise passed through unchanged.
template <class T>
Matrix<T> sac_forward_rows(const Matrix<T>& rows, std::size_t num_ctx, const ConvRulebook& rb,
                           const ConvParams<T>& params);

// Accumulates parameter gradients into grads and returns the input gradient.
template <class T>
Matrix<T> sac_backward_rows(const Matrix<T>& grad_out, const Matrix<T>& saved_rows, std::size_t num_ctx,
                            const ConvRulebook& rb, const ConvParams<T>& params, ConvGrads<T> grads);

template <class T>
SparseMap<T> sac_forward(const SparseMap<T>& map, const ConvRulebook& rb, const ConvParams<T>& params);

template <class T>
struct SacGradients {
  Matrix<T> grad_features;
  Matrix<T> grad_context;
  Matrix<T> grad_weight;  // K^2 * out_dim x in_dim
  std::vector<T> grad_bias;
};

// grad_out has n_out patch rows followed by num_ctx context rows.
template <class T>
SacGradients<T> sac_backward(const Matrix<T>& grad_out, const SparseMap<T>& saved_input, const ConvRulebook& rb,
                             const ConvParams<T>& params);

}  // namespace span
