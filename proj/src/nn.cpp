#include "span/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "span/error.hpp"
#include "span/kernels.hpp"

namespace span {

template <class T>
Matrix<T> linear_rows(const Matrix<T>& x, std::span<const T> w, std::span<const T> b, std::size_t out_dim) {
  const std::size_t in_dim = x.cols();
  if (w.size() != out_dim * in_dim || (!b.empty() && b.size() != out_dim))
    throw Error(ErrorCode::DimensionMismatch, "linear weight shape does not match input");
  Matrix<T> y(x.rows(), out_dim);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    T* yr = y.row(n).data();
    if (!b.empty()) std::copy(b.begin(), b.end(), yr);
    kernels::gemv_acc(w.data(), out_dim, in_dim, x.row(n).data(), yr);
  }
  return y;
}

template <class T>
Matrix<T> linear_rows_backward(const Matrix<T>& grad_y, const Matrix<T>& x, std::span<const T> w,
                               std::size_t out_dim, std::span<T> grad_w, std::span<T> grad_b) {
  const std::size_t in_dim = x.cols();
  Matrix<T> gx(x.rows(), in_dim);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const T* g = grad_y.row(n).data();
    kernels::gemv_t_acc(w.data(), out_dim, in_dim, g, gx.row(n).data());
    kernels::ger_acc(grad_w.data(), out_dim, in_dim, g, x.row(n).data());
    if (!grad_b.empty())
      for (std::size_t o = 0; o < out_dim; ++o) grad_b[o] += g[o];
  }
  return gx;
}

template <class T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, std::span<const T> scale, std::span<const T> shift,
                          LayerNormCache<T>* cache) {
  const std::size_t d = x.cols();
  if (scale.size() != d || shift.size() != d) throw Error(ErrorCode::DimensionMismatch, "layer norm width");
  Matrix<T> y(x.rows(), d);
  Matrix<T> xhat(x.rows(), d);
  std::vector<T> rstd(x.rows());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const T* xr = x.row(n).data();
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[n] = r;
    for (std::size_t c = 0; c < d; ++c) {
      xhat(n, c) = (xr[c] - mean) * r;
      y(n, c) = xhat(n, c) * scale[c] + shift[c];
    }
  }
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
Matrix<T> layer_norm_rows_backward(const Matrix<T>& grad_y, const LayerNormCache<T>& cache,
                                   std::span<const T> scale, std::span<T> grad_scale, std::span<T> grad_shift) {
  const std::size_t d = grad_y.cols();
  Matrix<T> gx(grad_y.rows(), d);
  std::vector<T> gxhat(d);
  for (std::size_t n = 0; n < grad_y.rows(); ++n) {
    T mean_g = 0, mean_gx = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const T g = grad_y(n, c);
      grad_scale[c] += g * cache.xhat(n, c);
      grad_shift[c] += g;
      gxhat[c] = g * scale[c];
      mean_g += gxhat[c];
      mean_gx += gxhat[c] * cache.xhat(n, c);
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t c = 0; c < d; ++c)
      gx(n, c) = cache.rstd[n] * (gxhat[c] - mean_g - cache.xhat(n, c) * mean_gx);
  }
  return gx;
}

template <class T>
T gelu(T x) noexcept {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) noexcept {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

namespace ops {

template <class T>
NodeId linear(Tape<T>& tape, NodeId x, Param<T>& w, Param<T>* b) {
  const std::size_t out_dim = w.value.rows();
  std::span<const T> bias = b ? b->value.flat() : std::span<const T>{};
  Matrix<T> y = linear_rows(tape.value(x), std::span<const T>(w.value.flat()), bias, out_dim);
  return tape.record(std::move(y), [x, &w, b, out_dim, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gx = linear_rows_backward(t.grad(self), t.value(x), std::span<const T>(w.value.flat()), out_dim,
                                              w.grad.flat(), b ? b->grad.flat() : std::span<T>{});
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gx.data()[i];
  });
}

template <class T>
NodeId layer_norm(Tape<T>& tape, NodeId x, Param<T>& scale, Param<T>& shift) {
  auto cache = std::make_shared<LayerNormCache<T>>();
  Matrix<T> y = layer_norm_rows(tape.value(x), std::span<const T>(scale.value.flat()),
                                std::span<const T>(shift.value.flat()), cache.get());
  return tape.record(std::move(y), [x, &scale, &shift, cache, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gx = layer_norm_rows_backward(t.grad(self), *cache, std::span<const T>(scale.value.flat()),
                                                  scale.grad.flat(), shift.grad.flat());
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gx.data()[i];
  });
}

template <class T>
NodeId gelu(Tape<T>& tape, NodeId x) {
  const Matrix<T>& in = tape.value(x);
  Matrix<T> y(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.size(); ++i) y.data()[i] = span::gelu(in.data()[i]);
  return tape.record(std::move(y), [x, self = tape.size()](Tape<T>& t) {
    const Matrix<T>& gy = t.grad(self);
    const Matrix<T>& in = t.value(x);
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gy.data()[i] * gelu_grad(in.data()[i]);
  });
}

template <class T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b) {
  const Matrix<T>& va = tape.value(a);
  const Matrix<T>& vb = tape.value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) throw Error(ErrorCode::DimensionMismatch, "add shapes");
  Matrix<T> y = va;
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += vb.data()[i];
  return tape.record(std::move(y), [a, b, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gy = t.grad(self);
    for (NodeId dst : {a, b}) {
      auto& g = t.grad(dst);
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gy.data()[i];
    }
  });
}

template <class T>
NodeId concat_cols(Tape<T>& tape, NodeId a, NodeId b) {
  const Matrix<T>& va = tape.value(a);
  const Matrix<T>& vb = tape.value(b);
  if (va.rows() != vb.rows()) throw Error(ErrorCode::DimensionMismatch, "concat row counts differ");
  const std::size_t ca = va.cols(), cb = vb.cols();
  Matrix<T> y(va.rows(), ca + cb);
  for (std::size_t n = 0; n < va.rows(); ++n) {
    std::copy_n(va.row(n).data(), ca, y.row(n).data());
    std::copy_n(vb.row(n).data(), cb, y.row(n).data() + ca);
  }
  return tape.record(std::move(y), [a, b, ca, cb, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gy = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t n = 0; n < gy.rows(); ++n)
      for (std::size_t c = 0; c < ca; ++c) ga(n, c) += gy(n, c);
    auto& gb = t.grad(b);
    for (std::size_t n = 0; n < gy.rows(); ++n)
      for (std::size_t c = 0; c < cb; ++c) gb(n, c) += gy(n, ca + c);
  });
}

template <class T>
NodeId slice_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count) {
  const Matrix<T>& in = tape.value(x);
  if (begin + count > in.rows()) throw Error(ErrorCode::DimensionMismatch, "row slice out of range");
  Matrix<T> y(count, in.cols());
  std::copy_n(in.row(begin).data(), count * in.cols(), y.data());
  return tape.record(std::move(y), [x, begin, self = tape.size()](Tape<T>& t) {
    const Matrix<T>& gy = t.grad(self);
    auto& g = t.grad(x);
    T* dst = g.row(begin).data();
    for (std::size_t i = 0; i < gy.size(); ++i) dst[i] += gy.data()[i];
  });
}

namespace {

template <class T>
NodeId scaled_row_sum(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count, T scale) {
  const Matrix<T>& in = tape.value(x);
  if (begin + count > in.rows()) throw Error(ErrorCode::DimensionMismatch, "row range out of range");
  Matrix<T> y(1, in.cols());
  for (std::size_t n = begin; n < begin + count; ++n)
    for (std::size_t c = 0; c < in.cols(); ++c) y(0, c) += in(n, c);
  for (T& v : y.storage()) v *= scale;
  return tape.record(std::move(y), [x, begin, count, scale, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gy = t.grad(self);
    auto& g = t.grad(x);
    for (std::size_t n = begin; n < begin + count; ++n)
      for (std::size_t c = 0; c < g.cols(); ++c) g(n, c) += scale * gy(0, c);
  });
}

}  // namespace

template <class T>
NodeId sum_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count) {
  return scaled_row_sum(tape, x, begin, count, T(1));
}

template <class T>
NodeId mean_rows(Tape<T>& tape, NodeId x, std::size_t begin, std::size_t count) {
  if (count == 0) throw Error(ErrorCode::EmptyMap, "mean over zero rows");
  return scaled_row_sum(tape, x, begin, count, T(1) / static_cast<T>(count));
}

template <class T>
NodeId add_param_rows(Tape<T>& tape, NodeId x, std::size_t begin, Param<T>& p) {
  Matrix<T> y = tape.value(x);
  if (begin + p.value.rows() > y.rows() || p.value.cols() != y.cols())
    throw Error(ErrorCode::DimensionMismatch, "parameter rows do not fit");
  for (std::size_t r = 0; r < p.value.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(begin + r, c) += p.value(r, c);
  return tape.record(std::move(y), [x, begin, &p, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gy = t.grad(self);
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gy.data()[i];
    for (std::size_t r = 0; r < p.value.rows(); ++r)
      for (std::size_t c = 0; c < gy.cols(); ++c) p.grad(r, c) += gy(begin + r, c);
  });
}

template <class T>
NodeId sac(Tape<T>& tape, NodeId x, std::size_t num_ctx, std::shared_ptr<const ConvRulebook> rb, Param<T>& weight,
           Param<T>& bias) {
  const std::size_t in_dim = weight.value.cols();
  const std::size_t out_dim = bias.value.size();
  auto view = [&weight, &bias, in_dim, out_dim]() {
    return ConvParams<T>{weight.value.flat(), bias.value.flat(), in_dim, out_dim};
  };
  Matrix<T> y = sac_forward_rows(tape.value(x), num_ctx, *rb, view());
  return tape.record(std::move(y), [x, num_ctx, rb, &weight, &bias, view, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gx =
        sac_backward_rows(t.grad(self), t.value(x), num_ctx, *rb, view(), ConvGrads<T>{weight.grad.flat(), bias.grad.flat()});
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gx.data()[i];
  });
}

}  // namespace ops

#define SPAN_INSTANTIATE(T)                                                                                      \
  template Matrix<T> linear_rows(const Matrix<T>&, std::span<const T>, std::span<const T>, std::size_t);         \
  template Matrix<T> linear_rows_backward(const Matrix<T>&, const Matrix<T>&, std::span<const T>, std::size_t,   \
                                          std::span<T>, std::span<T>);                                          \
  template Matrix<T> layer_norm_rows(const Matrix<T>&, std::span<const T>, std::span<const T>, LayerNormCache<T>*); \
  template Matrix<T> layer_norm_rows_backward(const Matrix<T>&, const LayerNormCache<T>&, std::span<const T>,    \
                                              std::span<T>, std::span<T>);                                      \
  template T gelu(T) noexcept;                                                                                   \
  template T gelu_grad(T) noexcept;                                                                              \
  template NodeId ops::linear(Tape<T>&, NodeId, Param<T>&, Param<T>*);                                           \
  template NodeId ops::layer_norm(Tape<T>&, NodeId, Param<T>&, Param<T>&);                                       \
  template NodeId ops::gelu(Tape<T>&, NodeId);                                                                   \
  template NodeId ops::add(Tape<T>&, NodeId, NodeId);                                                            \
  template NodeId ops::concat_cols(Tape<T>&, NodeId, NodeId);                                                    \
  template NodeId ops::slice_rows(Tape<T>&, NodeId, std::size_t, std::size_t);                                   \
  template NodeId ops::sum_rows(Tape<T>&, NodeId, std::size_t, std::size_t);                                     \
  template NodeId ops::mean_rows(Tape<T>&, NodeId, std::size_t, std::size_t);                                    \
  template NodeId ops::add_param_rows(Tape<T>&, NodeId, std::size_t, Param<T>&);                                 \
  template NodeId ops::sac(Tape<T>&, NodeId, std::size_t, std::shared_ptr<const ConvRulebook>, Param<T>&, Param<T>&);

SPAN_INSTANTIATE(float)
SPAN_INSTANTIATE(double)
#undef SPAN_INSTANTIATE

}  // namespace span
