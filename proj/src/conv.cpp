#include "span/conv.hpp"

#include <algorithm>
#include <unordered_map>

#include "span/error.hpp"
#include "span/kernels.hpp"

namespace span {

namespace {

std::uint64_t pack(const Coord& c) noexcept {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)) << 32) | static_cast<std::uint32_t>(c.x);
}

// Solves p_in = S * p_out + D * k on one axis; false when no non-negative integer solution.
bool anchor(std::int32_t p_in, int k, int stride, int dilation, std::int32_t& p_out) noexcept {
  const std::int64_t q = static_cast<std::int64_t>(p_in) - static_cast<std::int64_t>(k) * dilation;
  if (q < 0 || q % stride != 0) return false;
  p_out = static_cast<std::int32_t>(q / stride);
  return true;
}

template <class Fn>
void for_each_output(const Coord& p, const ConvSpec& spec, Fn&& fn) {
  const int kk = spec.kernel;
  for (int k = 0; k < kk * kk; ++k) {
    const KernelOffset off = kernel_offset(k, kk);
    Coord out;
    if (anchor(p.x, off.kx, spec.stride, spec.dilation, out.x) &&
        anchor(p.y, off.ky, spec.stride, spec.dilation, out.y))
      fn(k, out);
  }
}

void check_rows(std::size_t rows, std::size_t cols, std::size_t n_in, std::size_t num_ctx, std::size_t in_dim) {
  if (rows != n_in + num_ctx)
    throw Error(ErrorCode::RulebookMismatch, "rulebook expects " + std::to_string(n_in) + " inputs, got " +
                                                 std::to_string(rows - std::min(rows, num_ctx)));
  if (cols != in_dim)
    throw Error(ErrorCode::DimensionMismatch,
                "feature width " + std::to_string(cols) + " vs in_dim " + std::to_string(in_dim));
}

template <class T>
void check_params(const ConvRulebook& rb, const ConvParams<T>& params) {
  const std::size_t expected = rb.num_offsets() * params.in_dim * params.out_dim;
  if (params.weight.size() != expected || params.bias.size() != params.out_dim)
    throw Error(ErrorCode::DimensionMismatch, "conv parameters do not match rulebook kernel / dims");
}

}  // namespace

void validate(const ConvSpec& spec) {
  if (spec.kernel < 1 || spec.stride < 1 || spec.dilation < 1)
    throw Error(ErrorCode::InvalidArgument, "kernel, stride and dilation must be >= 1");
}

std::size_t ConvRulebook::total_pairs() const noexcept {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.size();
  return n;
}

std::vector<Coord> compute_output_coords(std::span<const Coord> coords_in, const ConvSpec& spec) {
  validate(spec);
  if (spec.kind != ConvKind::forward)
    throw Error(ErrorCode::InvalidArgument, "output coordinates are only generated for forward convolutions");
  std::vector<Coord> out;
  out.reserve(coords_in.size());
  for (const Coord& p : coords_in) for_each_output(p, spec, [&](int, const Coord& o) { out.push_back(o); });
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ConvRulebook build_conv_rulebook(std::span<const Coord> coords_in, const ConvSpec& spec) {
  ConvRulebook rb;
  rb.kernel = spec.kernel;
  rb.stride = spec.stride;
  rb.dilation = spec.dilation;
  rb.kind = ConvKind::forward;
  rb.in_coords.assign(coords_in.begin(), coords_in.end());
  rb.out_coords = compute_output_coords(coords_in, spec);
  rb.pairs.resize(static_cast<std::size_t>(spec.kernel * spec.kernel));

  std::unordered_map<std::uint64_t, std::uint32_t> out_index;
  out_index.reserve(rb.out_coords.size() * 2);
  for (std::size_t i = 0; i < rb.out_coords.size(); ++i)
    out_index.emplace(pack(rb.out_coords[i]), static_cast<std::uint32_t>(i));

  for (std::size_t i = 0; i < coords_in.size(); ++i) {
    for_each_output(coords_in[i], spec, [&](int k, const Coord& o) {
      rb.pairs[static_cast<std::size_t>(k)].push_back({static_cast<std::uint32_t>(i), out_index.at(pack(o))});
    });
  }
  for (auto& list : rb.pairs)
    std::sort(list.begin(), list.end(),
              [](const RulePair& a, const RulePair& b) { return a.out != b.out ? a.out < b.out : a.in < b.in; });
  return rb;
}

ConvRulebook transpose_rulebook(const ConvRulebook& rb, std::span<const Coord> original_in_coords) {
  if (original_in_coords.size() != rb.n_in())
    throw Error(ErrorCode::RulebookMismatch, "original input coordinates do not match rulebook");
  ConvRulebook t;
  t.kernel = rb.kernel;
  t.stride = rb.stride;
  t.dilation = rb.dilation;
  t.kind = rb.kind == ConvKind::forward ? ConvKind::transposed : ConvKind::forward;
  t.in_coords = rb.out_coords;
  t.out_coords.assign(original_in_coords.begin(), original_in_coords.end());
  t.pairs.resize(rb.pairs.size());
  for (std::size_t k = 0; k < rb.pairs.size(); ++k) {
    auto& list = t.pairs[k];
    list.reserve(rb.pairs[k].size());
    for (const RulePair& p : rb.pairs[k]) list.push_back({p.out, p.in});
    std::sort(list.begin(), list.end(),
              [](const RulePair& a, const RulePair& b) { return a.out != b.out ? a.out < b.out : a.in < b.in; });
  }
  return t;
}

ConvRulebook transpose_rulebook(const ConvRulebook& rb) { return transpose_rulebook(rb, rb.in_coords); }

template <class T>
Matrix<T> sac_forward_rows(const Matrix<T>& rows, std::size_t num_ctx, const ConvRulebook& rb,
                           const ConvParams<T>& params) {
  check_rows(rows.rows(), rows.cols(), rb.n_in(), num_ctx, params.in_dim);
  check_params(rb, params);
  const std::size_t din = params.in_dim, dout = params.out_dim;
  const std::size_t n_out = rb.n_out();
  Matrix<T> out(n_out + num_ctx, dout);

  for (std::size_t i = 0; i < n_out; ++i) std::copy(params.bias.begin(), params.bias.end(), out.row(i).begin());
  for (std::size_t k = 0; k < rb.num_offsets(); ++k) {
    const T* w = params.offset_weight(k);
    for (const RulePair& p : rb.pairs[k]) kernels::gemv_acc(w, dout, din, rows.row(p.in).data(), out.row(p.out).data());
  }

  const std::size_t base_in = rb.n_in();
  for (std::size_t c = 0; c < num_ctx; ++c) {
    T* dst = out.row(n_out + c).data();
    const T* src = rows.row(base_in + c).data();
    if (din == dout) {
      std::copy_n(src, dout, dst);
      continue;
    }
    const std::size_t kk = rb.num_offsets();
    std::vector<T> acc(dout, T(0));
    for (std::size_t k = 0; k < kk; ++k) kernels::gemv_acc(params.offset_weight(k), dout, din, src, acc.data());
    for (std::size_t o = 0; o < dout; ++o) dst[o] = acc[o] / static_cast<T>(kk) + params.bias[o];
  }
  return out;
}

template <class T>
Matrix<T> sac_backward_rows(const Matrix<T>& grad_out, const Matrix<T>& saved_rows, std::size_t num_ctx,
                            const ConvRulebook& rb, const ConvParams<T>& params, ConvGrads<T> grads) {
  check_rows(saved_rows.rows(), saved_rows.cols(), rb.n_in(), num_ctx, params.in_dim);
  check_params(rb, params);
  const std::size_t din = params.in_dim, dout = params.out_dim;
  const std::size_t n_out = rb.n_out();
  if (grad_out.rows() != n_out + num_ctx || grad_out.cols() != dout)
    throw Error(ErrorCode::DimensionMismatch, "grad_out shape does not match the forward output");
  if (grads.weight.size() != params.weight.size() || grads.bias.size() != dout)
    throw Error(ErrorCode::DimensionMismatch, "gradient buffers do not match parameter shapes");

  Matrix<T> grad_in(saved_rows.rows(), din);
  for (std::size_t i = 0; i < n_out; ++i)
    for (std::size_t o = 0; o < dout; ++o) grads.bias[o] += grad_out(i, o);

  for (std::size_t k = 0; k < rb.num_offsets(); ++k) {
    const T* w = params.offset_weight(k);
    T* gw = grads.weight.data() + k * din * dout;
    for (const RulePair& p : rb.pairs[k]) {
      const T* g = grad_out.row(p.out).data();
      kernels::gemv_t_acc(w, dout, din, g, grad_in.row(p.in).data());
      kernels::ger_acc(gw, dout, din, g, saved_rows.row(p.in).data());
    }
  }

  const std::size_t base_in = rb.n_in();
  for (std::size_t c = 0; c < num_ctx; ++c) {
    const T* g = grad_out.row(n_out + c).data();
    T* gi = grad_in.row(base_in + c).data();
    if (din == dout) {
      for (std::size_t o = 0; o < dout; ++o) gi[o] += g[o];
      continue;
    }
    const std::size_t kk = rb.num_offsets();
    std::vector<T> scaled(g, g + dout);
    for (T& v : scaled) v /= static_cast<T>(kk);
    for (std::size_t o = 0; o < dout; ++o) grads.bias[o] += g[o];
    const T* x = saved_rows.row(base_in + c).data();
    for (std::size_t k = 0; k < kk; ++k) {
      kernels::gemv_t_acc(params.offset_weight(k), dout, din, scaled.data(), gi);
      kernels::ger_acc(grads.weight.data() + k * din * dout, dout, din, scaled.data(), x);
    }
  }
  return grad_in;
}

namespace {

template <class T>
Matrix<T> stack_rows(const SparseMap<T>& map) {
  Matrix<T> rows(map.size() + map.num_ctx(), map.feature_dim());
  std::copy(map.features.storage().begin(), map.features.storage().end(), rows.data());
  std::copy(map.context.storage().begin(), map.context.storage().end(), rows.data() + map.features.size());
  return rows;
}

}  // namespace

template <class T>
SparseMap<T> sac_forward(const SparseMap<T>& map, const ConvRulebook& rb, const ConvParams<T>& params) {
  if (map.feature_dim() != params.in_dim)
    throw Error(ErrorCode::DimensionMismatch, "map feature_dim does not match conv in_dim");
  if (map.size() != rb.n_in()) throw Error(ErrorCode::RulebookMismatch, "rulebook n_in differs from map size");
  const Matrix<T> out = sac_forward_rows(stack_rows(map), map.num_ctx(), rb, params);
  SparseMap<T> result;
  result.coords = rb.out_coords;
  result.features = Matrix<T>(rb.n_out(), params.out_dim);
  result.context = Matrix<T>(map.num_ctx(), params.out_dim);
  std::copy_n(out.data(), result.features.size(), result.features.data());
  std::copy_n(out.data() + result.features.size(), result.context.size(), result.context.data());
  return result;
}

template <class T>
SacGradients<T> sac_backward(const Matrix<T>& grad_out, const SparseMap<T>& saved_input, const ConvRulebook& rb,
                             const ConvParams<T>& params) {
  SacGradients<T> g;
  g.grad_weight = Matrix<T>(rb.num_offsets() * params.out_dim, params.in_dim);
  g.grad_bias.assign(params.out_dim, T(0));
  const Matrix<T> grad_rows = sac_backward_rows(grad_out, stack_rows(saved_input), saved_input.num_ctx(), rb, params,
                                                ConvGrads<T>{g.grad_weight.flat(), g.grad_bias});
  g.grad_features = Matrix<T>(saved_input.size(), params.in_dim);
  g.grad_context = Matrix<T>(saved_input.num_ctx(), params.in_dim);
  std::copy_n(grad_rows.data(), g.grad_features.size(), g.grad_features.data());
  std::copy_n(grad_rows.data() + g.grad_features.size(), g.grad_context.size(), g.grad_context.data());
  return g;
}

#define SPAN_INSTANTIATE(T)                                                                                     \
  template Matrix<T> sac_forward_rows(const Matrix<T>&, std::size_t, const ConvRulebook&, const ConvParams<T>&); \
  template Matrix<T> sac_backward_rows(const Matrix<T>&, const Matrix<T>&, std::size_t, const ConvRulebook&,     \
                                       const ConvParams<T>&, ConvGrads<T>);                                     \
  template SparseMap<T> sac_forward(const SparseMap<T>&, const ConvRulebook&, const ConvParams<T>&);             \
  template SacGradients<T> sac_backward(const Matrix<T>&, const SparseMap<T>&, const ConvRulebook&,              \
                                        const ConvParams<T>&);

SPAN_INSTANTIATE(float)
SPAN_INSTANTIATE(double)
#undef SPAN_INSTANTIATE

}  // namespace span
