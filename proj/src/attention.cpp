#include "span/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "span/error.hpp"
#include "span/kernels.hpp"
#include "span/nn.hpp"

namespace span {

WindowSet generate_windows(const DenseIndexGrid& grid, int window_side, Shift shift) {
  if (window_side < 1) throw Error(ErrorCode::InvalidArgument, "window side must be >= 1");
  if (shift == Shift::half && window_side % 2 != 0)
    throw Error(ErrorCode::InvalidArgument, "half shift needs an even window side");
  const auto w = static_cast<std::size_t>(window_side);
  const std::size_t pad = shift == Shift::half ? w / 2 : 0;
  const std::size_t blocks_y = (grid.height + pad + w - 1) / w;
  const std::size_t blocks_x = (grid.width + pad + w - 1) / w;

  WindowSet set;
  set.shift = shift;
  set.window_side = window_side;
  for (std::size_t by = 0; by < blocks_y; ++by) {
    for (std::size_t bx = 0; bx < blocks_x; ++bx) {
      std::vector<std::uint32_t> members;
      for (std::size_t py = by * w; py < (by + 1) * w; ++py) {
        if (py < pad || py - pad >= grid.height) continue;
        for (std::size_t px = bx * w; px < (bx + 1) * w; ++px) {
          if (px < pad || px - pad >= grid.width) continue;
          const std::uint32_t id = grid.at(py - pad, px - pad);
          if (id != 0) members.push_back(id - 1);
        }
      }
      if (!members.empty()) set.windows.push_back(std::move(members));
    }
  }
  return set;
}

AttnRulebook build_attention_rulebook(std::span<const Coord> coords, int window_side, Shift shift,
                                      std::size_t num_ctx) {
  if (coords.empty()) throw Error(ErrorCode::EmptyMap, "attention rulebook needs at least one token");
  if (window_side < 1) throw Error(ErrorCode::InvalidArgument, "window side must be >= 1");
  const std::size_t n = coords.size();

  std::int32_t min_x = coords[0].x, max_x = coords[0].x, min_y = coords[0].y, max_y = coords[0].y;
  for (const Coord& c : coords) {
    min_x = std::min(min_x, c.x);
    max_x = std::max(max_x, c.x);
    min_y = std::min(min_y, c.y);
    max_y = std::max(max_y, c.y);
  }

  AttnRulebook rb;
  rb.n_tokens = n;
  rb.num_ctx = num_ctx;
  rb.window_side = window_side;
  rb.compact = max_x - min_x < window_side && max_y - min_y < window_side;

  std::vector<std::vector<std::uint32_t>> windows;
  if (rb.compact) {
    windows.emplace_back(n);
    for (std::size_t i = 0; i < n; ++i) windows[0][i] = static_cast<std::uint32_t>(i);
  } else {
    windows = generate_windows(densify_index_grid(coords), window_side, shift).windows;
  }
  std::vector<std::uint32_t> window_of(n);
  for (std::size_t w = 0; w < windows.size(); ++w)
    for (std::uint32_t i : windows[w]) window_of[i] = static_cast<std::uint32_t>(w);

  const std::size_t rows = n + num_ctx;
  rb.local.offsets.assign(rows + 1, 0);
  for (std::size_t q = 0; q < n; ++q) {
    const auto& members = windows[window_of[q]];
    for (std::uint32_t k : members) {
      rb.local.keys.push_back(k);
      const int dx = coords[q].x - coords[k].x;
      const int dy = coords[q].y - coords[k].y;
      rb.local_bias_index.push_back(static_cast<std::uint32_t>(rpb_index(dx, dy, window_side)));
    }
    rb.local.offsets[q + 1] = static_cast<std::uint32_t>(rb.local.keys.size());
  }
  for (std::size_t q = n; q < rows; ++q) rb.local.offsets[q + 1] = rb.local.offsets[q];

  rb.global.offsets.assign(rows + 1, 0);
  if (num_ctx > 0) {
    rb.global.keys.reserve(2 * n * num_ctx);
    for (std::size_t q = 0; q < n; ++q) {
      for (std::size_t b = 0; b < num_ctx; ++b) rb.global.keys.push_back(static_cast<std::uint32_t>(n + b));
      rb.global.offsets[q + 1] = static_cast<std::uint32_t>(rb.global.keys.size());
    }
    for (std::size_t q = n; q < rows; ++q) {
      for (std::size_t i = 0; i < n; ++i) rb.global.keys.push_back(static_cast<std::uint32_t>(i));
      rb.global.offsets[q + 1] = static_cast<std::uint32_t>(rb.global.keys.size());
    }
  }
  return rb;
}

namespace {

template <class T>
void check_attention(const Matrix<T>& h, std::span<const Coord> coords, const AttnRulebook& rb,
                     const AttentionParams<T>& p) {
  if (coords.size() != rb.n_tokens || h.rows() != rb.n_tokens + rb.num_ctx ||
      rb.local.num_queries() != h.rows() || rb.global.num_queries() != h.rows())
    throw Error(ErrorCode::RulebookMismatch, "attention rulebook was built for a different token set");
  if (h.cols() != p.dim || p.heads == 0 || p.dim % p.heads != 0)
    throw Error(ErrorCode::DimensionMismatch, "feature width / head count mismatch");
  if (p.rpb.size() != rpb_rows(rb.window_side) * p.heads)
    throw Error(ErrorCode::DimensionMismatch, "RPB table size does not match window side and heads");
}

// Softmax over one query's key list for one head; writes probabilities into prob.
template <class T>
void softmax_scores(const Matrix<T>& q, const Matrix<T>& k, std::size_t query, std::span<const std::uint32_t> keys,
                    std::size_t head_off, std::size_t dh, T scale, const T* rpb, const std::uint32_t* bias_index,
                    std::size_t heads, std::size_t head, T* prob) {
  const T* qi = q.row(query).data() + head_off;
  T max_s = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < keys.size(); ++j) {
    T s = kernels::dot(qi, k.row(keys[j]).data() + head_off, dh) * scale;
    if (rpb != nullptr) s += rpb[bias_index[j] * heads + head];
    prob[j] = s;
    max_s = std::max(max_s, s);
  }
  T sum = 0;
  for (std::size_t j = 0; j < keys.size(); ++j) {
    prob[j] = std::exp(prob[j] - max_s);
    sum += prob[j];
  }
  for (std::size_t j = 0; j < keys.size(); ++j) prob[j] /= sum;
}

}  // namespace

template <class T>
Matrix<T> attention_forward(const Matrix<T>& h, std::span<const Coord> coords, const AttnRulebook& rb,
                            const AttentionParams<T>& p, AttentionCache<T>* cache) {
  check_attention(h, coords, rb, p);
  const std::size_t d = p.dim, heads = p.heads, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> q = linear_rows(h, p.wq, p.bq, d);
  Matrix<T> k = linear_rows(h, p.wk, p.bk, d);
  Matrix<T> v = linear_rows(h, p.wv, p.bv, d);
  Matrix<T> mixed(h.rows(), d);
  std::vector<T> p_local(rb.local.num_pairs() * heads);
  std::vector<T> p_global(rb.global.num_pairs() * heads);
  std::vector<T> prob;

  for (std::size_t i = 0; i < h.rows(); ++i) {
    T* out = mixed.row(i).data();
    for (const bool local : {true, false}) {
      const PairList& list = local ? rb.local : rb.global;
      const auto keys = list.keys_of(i);
      if (keys.empty()) continue;
      const std::size_t first = list.offsets[i];
      prob.resize(keys.size());
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        softmax_scores(q, k, i, keys, off, dh, scale, local ? p.rpb.data() : nullptr,
                       local ? rb.local_bias_index.data() + first : nullptr, heads, hd, prob.data());
        std::vector<T>& store = local ? p_local : p_global;
        for (std::size_t j = 0; j < keys.size(); ++j) {
          store[(first + j) * heads + hd] = prob[j];
          kernels::axpy(prob[j], v.row(keys[j]).data() + off, out + off, dh);
        }
      }
    }
  }

  Matrix<T> y = linear_rows(mixed, p.wo, p.bo, d);
  if (cache != nullptr) {
    cache->x = h;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->mixed = std::move(mixed);
    cache->p_local = std::move(p_local);
    cache->p_global = std::move(p_global);
  }
  return y;
}

template <class T>
Matrix<T> attention_backward(const Matrix<T>& grad_out, const AttentionCache<T>& cache, const AttnRulebook& rb,
                             const AttentionParams<T>& p, AttentionGrads<T> g) {
  const std::size_t d = p.dim, heads = p.heads, dh = d / heads;
  if (grad_out.rows() != cache.x.rows() || grad_out.cols() != d)
    throw Error(ErrorCode::DimensionMismatch, "grad_out shape does not match attention output");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  const Matrix<T> gmixed = linear_rows_backward(grad_out, cache.mixed, p.wo, d, g.wo, g.bo);
  Matrix<T> gq(cache.x.rows(), d), gk(cache.x.rows(), d), gv(cache.x.rows(), d);
  std::vector<T> dp;

  for (std::size_t i = 0; i < cache.x.rows(); ++i) {
    const T* go = gmixed.row(i).data();
    for (const bool local : {true, false}) {
      const PairList& list = local ? rb.local : rb.global;
      const auto keys = list.keys_of(i);
      if (keys.empty()) continue;
      const std::size_t first = list.offsets[i];
      const std::vector<T>& probs = local ? cache.p_local : cache.p_global;
      dp.resize(keys.size());
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * dh;
        T weighted = 0;
        for (std::size_t j = 0; j < keys.size(); ++j) {
          const T pj = probs[(first + j) * heads + hd];
          dp[j] = kernels::dot(go + off, cache.v.row(keys[j]).data() + off, dh);
          weighted += pj * dp[j];
          kernels::axpy(pj, go + off, gv.row(keys[j]).data() + off, dh);
        }
        for (std::size_t j = 0; j < keys.size(); ++j) {
          const T ds = probs[(first + j) * heads + hd] * (dp[j] - weighted);
          if (ds == T(0)) continue;
          kernels::axpy(ds * scale, cache.k.row(keys[j]).data() + off, gq.row(i).data() + off, dh);
          kernels::axpy(ds * scale, cache.q.row(i).data() + off, gk.row(keys[j]).data() + off, dh);
          if (local) g.rpb[rb.local_bias_index[first + j] * heads + hd] += ds;
        }
      }
    }
  }

  Matrix<T> gx = linear_rows_backward(gq, cache.x, p.wq, d, g.wq, g.bq);
  const Matrix<T> gxk = linear_rows_backward(gk, cache.x, p.wk, d, g.wk, g.bk);
  const Matrix<T> gxv = linear_rows_backward(gv, cache.x, p.wv, d, g.wv, g.bv);
  for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += gxk.data()[i] + gxv.data()[i];
  return gx;
}

template <class T>
AttentionParams<T> CarBlockParams<T>::attention_view() const {
  return AttentionParams<T>{wq->value.flat(), bq->value.flat(), wk->value.flat(), bk->value.flat(),
                            wv->value.flat(), bv->value.flat(), wo->value.flat(), bo->value.flat(),
                            rpb->value.flat(), wq->value.rows(), heads};
}

template <class T>
AttentionGrads<T> CarBlockParams<T>::attention_grads() const {
  return AttentionGrads<T>{wq->grad.flat(), bq->grad.flat(), wk->grad.flat(), bk->grad.flat(), wv->grad.flat(),
                           bv->grad.flat(), wo->grad.flat(), bo->grad.flat(), rpb->grad.flat()};
}

namespace {

template <class T>
Param<T>& uniform_param(ParamStore<T>& store, const std::string& name, std::size_t rows, std::size_t cols,
                        std::mt19937_64& rng) {
  Param<T>& p = store.add(name, rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : p.value.storage()) v = static_cast<T>(dist(rng));
  return p;
}

template <class T>
Param<T>& const_param(ParamStore<T>& store, const std::string& name, std::size_t rows, std::size_t cols, T value) {
  Param<T>& p = store.add(name, rows, cols);
  p.value.fill(value);
  return p;
}

}  // namespace

template <class T>
CarBlockParams<T> register_car_block(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                                     std::size_t heads, int window_side, bool rpb_enabled, std::mt19937_64& rng) {
  if (heads == 0 || dim % heads != 0)
    throw Error(ErrorCode::ConfigError, prefix + ": width " + std::to_string(dim) + " not divisible by heads");
  CarBlockParams<T> b;
  b.heads = heads;
  b.norm1_scale = &const_param<T>(store, prefix + ".norm1.scale", 1, dim, T(1));
  b.norm1_shift = &const_param<T>(store, prefix + ".norm1.shift", 1, dim, T(0));
  b.wq = &uniform_param(store, prefix + ".attn.wq", dim, dim, rng);
  b.bq = &const_param<T>(store, prefix + ".attn.bq", 1, dim, T(0));
  b.wk = &uniform_param(store, prefix + ".attn.wk", dim, dim, rng);
  b.bk = &const_param<T>(store, prefix + ".attn.bk", 1, dim, T(0));
  b.bk->frozen = true;  // softmax is invariant to a shared key offset: zero gradient
  b.wv = &uniform_param(store, prefix + ".attn.wv", dim, dim, rng);
  b.bv = &const_param<T>(store, prefix + ".attn.bv", 1, dim, T(0));
  b.wo = &uniform_param(store, prefix + ".attn.wo", dim, dim, rng);
  b.bo = &const_param<T>(store, prefix + ".attn.bo", 1, dim, T(0));
  b.rpb = &const_param<T>(store, prefix + ".attn.rpb", rpb_rows(window_side), heads, T(0));
  b.rpb->frozen = !rpb_enabled;
  b.norm2_scale = &const_param<T>(store, prefix + ".norm2.scale", 1, dim, T(1));
  b.norm2_shift = &const_param<T>(store, prefix + ".norm2.shift", 1, dim, T(0));
  b.ffn_w1 = &uniform_param(store, prefix + ".ffn.w1", kFfnExpansion * dim, dim, rng);
  b.ffn_b1 = &const_param<T>(store, prefix + ".ffn.b1", 1, kFfnExpansion * dim, T(0));
  b.ffn_w2 = &uniform_param(store, prefix + ".ffn.w2", dim, kFfnExpansion * dim, rng);
  b.ffn_b2 = &const_param<T>(store, prefix + ".ffn.b2", 1, dim, T(0));
  return b;
}

template <class T>
CarParams<T> register_car(ParamStore<T>& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                          int window_side, bool shift_enabled, bool rpb_enabled, std::mt19937_64& rng) {
  CarParams<T> p;
  p.window_side = window_side;
  p.shift_enabled = shift_enabled;
  if (window_side <= 0) return p;
  p.regular = register_car_block(store, prefix + ".regular", dim, heads, window_side, rpb_enabled, rng);
  p.shifted = register_car_block(store, prefix + ".shifted", dim, heads, window_side, rpb_enabled, rng);
  return p;
}

namespace ops {

template <class T>
NodeId attention(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords,
                 std::shared_ptr<const AttnRulebook> rb, const CarBlockParams<T>& params) {
  auto cache = std::make_shared<AttentionCache<T>>();
  Matrix<T> y = attention_forward(tape.value(x), *coords, *rb, params.attention_view(), cache.get());
  return tape.record(std::move(y), [x, rb, params, cache, self = tape.size()](Tape<T>& t) {
    const Matrix<T> gx =
        attention_backward(t.grad(self), *cache, *rb, params.attention_view(), params.attention_grads());
    auto& g = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += gx.data()[i];
  });
}

template <class T>
NodeId car_sub_block(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords,
                     std::shared_ptr<const AttnRulebook> rb, const CarBlockParams<T>& p) {
  NodeId n1 = layer_norm(tape, x, *p.norm1_scale, *p.norm1_shift);
  NodeId a = attention(tape, n1, coords, rb, p);
  NodeId x1 = add(tape, x, a);
  NodeId n2 = layer_norm(tape, x1, *p.norm2_scale, *p.norm2_shift);
  NodeId f = linear(tape, n2, *p.ffn_w1, p.ffn_b1);
  f = gelu(tape, f);
  f = linear(tape, f, *p.ffn_w2, p.ffn_b2);
  return add(tape, x1, f);
}

template <class T>
NodeId car_block(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords, std::size_t num_ctx,
                 const CarParams<T>& params) {
  if (params.window_side <= 0) return x;
  auto regular = std::make_shared<const AttnRulebook>(
      build_attention_rulebook(*coords, params.window_side, Shift::none, num_ctx));
  auto shifted = params.shift_enabled ? std::make_shared<const AttnRulebook>(build_attention_rulebook(
                                            *coords, params.window_side, Shift::half, num_ctx))
                                      : regular;
  NodeId y = car_sub_block(tape, x, coords, regular, params.regular);
  return car_sub_block(tape, y, coords, shifted, params.shifted);
}

}  // namespace ops

template <class T>
SparseMap<T> car_block_forward(const SparseMap<T>& map, const CarParams<T>& params) {
  if (params.window_side <= 0) return map;
  Tape<T> tape;
  Matrix<T> rows(map.size() + map.num_ctx(), map.feature_dim());
  std::copy(map.features.storage().begin(), map.features.storage().end(), rows.data());
  std::copy(map.context.storage().begin(), map.context.storage().end(), rows.data() + map.features.size());
  const NodeId x = tape.constant(std::move(rows));
  auto coords = std::make_shared<const std::vector<Coord>>(map.coords);
  const Matrix<T>& y = tape.value(ops::car_block(tape, x, coords, map.num_ctx(), params));
  SparseMap<T> out;
  out.coords = map.coords;
  out.features = Matrix<T>(map.size(), map.feature_dim());
  out.context = Matrix<T>(map.num_ctx(), map.feature_dim());
  std::copy_n(y.data(), out.features.size(), out.features.data());
  std::copy_n(y.data() + out.features.size(), out.context.size(), out.context.data());
  return out;
}

#define SPAN_INSTANTIATE(T)                                                                                      \
  template Matrix<T> attention_forward(const Matrix<T>&, std::span<const Coord>, const AttnRulebook&,            \
                                       const AttentionParams<T>&, AttentionCache<T>*);                          \
  template Matrix<T> attention_backward(const Matrix<T>&, const AttentionCache<T>&, const AttnRulebook&,         \
                                        const AttentionParams<T>&, AttentionGrads<T>);                          \
  template struct CarBlockParams<T>;                                                                             \
  template CarBlockParams<T> register_car_block(ParamStore<T>&, const std::string&, std::size_t, std::size_t,    \
                                                int, bool, std::mt19937_64&);                                   \
  template CarParams<T> register_car(ParamStore<T>&, const std::string&, std::size_t, std::size_t, int, bool,    \
                                     bool, std::mt19937_64&);                                                   \
  template NodeId ops::attention(Tape<T>&, NodeId, std::shared_ptr<const std::vector<Coord>>,                    \
                                 std::shared_ptr<const AttnRulebook>, const CarBlockParams<T>&);                \
  template NodeId ops::car_sub_block(Tape<T>&, NodeId, std::shared_ptr<const std::vector<Coord>>,                \
                                     std::shared_ptr<const AttnRulebook>, const CarBlockParams<T>&);            \
  template NodeId ops::car_block(Tape<T>&, NodeId, std::shared_ptr<const std::vector<Coord>>, std::size_t,       \
                                 const CarParams<T>&);                                                          \
  template SparseMap<T> car_block_forward(const SparseMap<T>&, const CarParams<T>&);

SPAN_INSTANTIATE(float)
SPAN_INSTANTIATE(double)
#undef SPAN_INSTANTIATE

}  // namespace span
