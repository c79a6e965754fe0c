#pragma once

// Dense row-wise layers (linear, layer norm, GELU) with explicit backward
// functions, and the Tape ops the model is assembled from.

#include <memory>
#include <span>
#include <vector>

#include "span/autodiff.hpp"
#include "span/conv.hpp"
#include "span/matrix.hpp"

namespace span {

inline constexpr double kLayerNormEps = 1e-5;

// y = x W^T + b, W is out_dim x in_dim row-major. b may be empty.
template <class T>
Matrix<T> linear_rows(const Matrix<T>& x, std::span<const T> w, std::span<const T> b, std::size_t out_dim);

// Accumulates into grad_w / grad_b (grad_b may be empty) and returns dL/dx.
template <class T>
Matrix<T> linear_rows_backward(const Matrix<T>& grad_y, const Matrix<T>& x, std::span<const T> w,
                               std::size_t out_dim, std::span<T> grad_w, std::span<T> grad_b);

template <class T>
struct LayerNormCache {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <class T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, std::span<const T> scale, std::span<const T> shift,
                          LayerNormCache<T>* cache);

template <class T>
Matrix<T> layer_norm_rows_backward(const Matrix<T>& grad_y, const LayerNormCache<T>& cache,
                                   std::span<const T> scale, std::span<T> grad_scale, std::span<T> grad_shift);

// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <class T>
T gelu(T x) noexcept;
template <class T>
T gelu_grad(T x) noexcept;

namespace ops {

template <class T>
NodeId linear(Tape<T>& tape, NodeId x, Param<T>& w, Param<T>* b);

template <class T>
NodeId layer_norm(Tape<T>& tape, NodeId x, Param<T>& scale, Param<T>& shift);

template <class T>
NodeId gelu(Tape<T>& tape, NodeId x);

template <class T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b);

template <class T>
NodeId concat_cols(Tape<T>& tape, NodeId a, NodeId b);

template <class T>
NodeId slice_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count);

// 1 x d sum (or mean) over rows [begin, begin + count).
template <class T>
NodeId sum_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count);
template <class T>
NodeId mean_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count);

// Adds the rows of p to x's rows [begin, begin + p.rows).
template <class T>
NodeId add_param_rows(Tape<T>& tape, NodeId x, std::size_t begin, Param<T>& p);

// Sparse convolution over a stacked (n_in + num_ctx) x in_dim node.
template <class T>
NodeId sac(Tape<T>& tape, NodeId x, std::size_t num_ctx, std::shared_ptr<const ConvRulebook> rb, Param<T>& weight,
           Param<T>& bias);

}  // namespace ops

}  // namespace span
