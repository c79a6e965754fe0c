#include "span/oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "span/autodiff.hpp"
#include "span/error.hpp"
#include "span/losses.hpp"
#include "span/model.hpp"
#include "span/nn.hpp"

namespace span {

template <class T>
DenseTensor<T> embed_dense(const SparseMap<T>& map, std::size_t height, std::size_t width) {
  DenseTensor<T> out(height, width, map.feature_dim());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto y = static_cast<std::size_t>(map.coords[i].y);
    const auto x = static_cast<std::size_t>(map.coords[i].x);
    if (y >= height || x >= width) throw Error(ErrorCode::IndexError, "coordinate outside dense extent");
    for (std::size_t c = 0; c < out.depth; ++c) out.at(y, x, c) = map.features(i, c);
  }
  return out;
}

template <class T>
DenseTensor<T> dense_conv_oracle(const DenseTensor<T>& in, int kernel, int stride, int dilation,
                                 const ConvParams<T>& params) {
  const long reach = static_cast<long>(kernel - 1) * dilation;
  const long oh = (static_cast<long>(in.height) - reach - 1) / stride + 1;
  const long ow = (static_cast<long>(in.width) - reach - 1) / stride + 1;
  if (static_cast<long>(in.height) - reach - 1 < 0 || static_cast<long>(in.width) - reach - 1 < 0 || oh <= 0 ||
      ow <= 0)
    throw Error(ErrorCode::NonPositiveOutputSize, "receptive field exceeds the input extent");
  if (params.in_dim != in.depth) throw Error(ErrorCode::DimensionMismatch, "oracle input depth");
  const std::size_t din = params.in_dim, dout = params.out_dim;
  DenseTensor<T> out(static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), dout);
  for (long oy = 0; oy < oh; ++oy)
    for (long ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < dout; ++o) {
        T acc = params.bias.empty() ? T(0) : params.bias[o];
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t iy = static_cast<std::size_t>(oy * stride + ky * dilation);
            const std::size_t ix = static_cast<std::size_t>(ox * stride + kx * dilation);
            const T* w = params.weight.data() + (static_cast<std::size_t>(ky * kernel + kx) * dout + o) * din;
            for (std::size_t c = 0; c < din; ++c) acc += w[c] * in.at(iy, ix, c);
          }
        out.at(static_cast<std::size_t>(oy), static_cast<std::size_t>(ox), o) = acc;
      }
  return out;
}

namespace {

// y = W x + b with W stored out x in.
template <class T>
std::vector<T> affine(std::span<const T> w, std::span<const T> b, const T* x, std::size_t out, std::size_t in) {
  std::vector<T> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    T acc = b[o];
    for (std::size_t c = 0; c < in; ++c) acc += w[o * in + c] * x[c];
    y[o] = acc;
  }
  return y;
}

}  // namespace

template <class T>
Matrix<T> dense_attention_oracle(const Matrix<T>& h, std::span<const Coord> coords, const AttentionMasks& masks,
                                 const AttentionParams<T>& params, int window_side) {
  const std::size_t rows = h.rows(), d = params.dim, heads = params.heads, dh = d / heads;
  if (masks.rows != rows) throw Error(ErrorCode::DimensionMismatch, "mask size does not match input rows");
  std::vector<std::vector<T>> q(rows), k(rows), v(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    q[i] = affine(params.wq, params.bq, h.row(i).data(), d, d);
    k[i] = affine(params.wk, params.bk, h.row(i).data(), d, d);
    v[i] = affine(params.wv, params.bv, h.row(i).data(), d, d);
  }
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const long side = 2L * window_side - 1;
  Matrix<T> mixed(rows, d);
  std::vector<T> score(rows);
  for (int pass = 0; pass < 2; ++pass) {
    const std::vector<std::uint8_t>& mask = pass == 0 ? masks.local : masks.global;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t i = 0; i < rows; ++i) {
        T best = neg_inf;
        for (std::size_t j = 0; j < rows; ++j) {
          if (!mask[i * rows + j]) {
            score[j] = neg_inf;
            continue;
          }
          T s = 0;
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) s += q[i][c] * k[j][c];
          s /= std::sqrt(static_cast<T>(dh));
          if (pass == 0) {
            const long dx = static_cast<long>(coords[i].x) - coords[j].x;
            const long dy = static_cast<long>(coords[i].y) - coords[j].y;
            const long row = (dx + window_side - 1) * side + (dy + window_side - 1);
            s += params.rpb[static_cast<std::size_t>(row) * heads + hd];
          }
          score[j] = s;
          best = std::max(best, s);
        }
        if (best == neg_inf) continue;
        T total = 0;
        for (std::size_t j = 0; j < rows; ++j) {
          score[j] = score[j] == neg_inf ? T(0) : std::exp(score[j] - best);
          total += score[j];
        }
        for (std::size_t j = 0; j < rows; ++j)
          for (std::size_t c = hd * dh; c < (hd + 1) * dh; ++c) mixed(i, c) += score[j] / total * v[j][c];
      }
    }
  }
  Matrix<T> out(rows, d);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::vector<T> y = affine(params.wo, params.bo, mixed.row(i).data(), d, d);
    std::copy(y.begin(), y.end(), out.row(i).data());
  }
  return out;
}

BruteConvRulebook brute_force_conv_rulebook(std::span<const Coord> coords, const ConvSpec& spec) {
  if (coords.size() > kBruteForceMaxTokens)
    throw Error(ErrorCode::TooLarge, std::to_string(coords.size()) + " tokens exceeds the brute-force guard");
  const int kk = spec.kernel, s = spec.stride, dil = spec.dilation;
  BruteConvRulebook out;
  out.pairs.resize(static_cast<std::size_t>(kk * kk));
  if (spec.kind == ConvKind::transposed) throw Error(ErrorCode::InvalidArgument, "brute force covers forward convs");
  int max_x = 0, max_y = 0;
  for (const Coord& c : coords) {
    max_x = std::max(max_x, c.x);
    max_y = std::max(max_y, c.y);
  }
  // Scan every candidate output site, every offset, every input.
  for (int oy = 0; oy <= max_y / s; ++oy)
    for (int ox = 0; ox <= max_x / s; ++ox) {
      std::vector<std::pair<std::size_t, std::uint32_t>> site;
      for (int ky = 0; ky < kk; ++ky)
        for (int kx = 0; kx < kk; ++kx)
          for (std::size_t i = 0; i < coords.size(); ++i)
            if (coords[i].x == ox * s + kx * dil && coords[i].y == oy * s + ky * dil)
              site.emplace_back(static_cast<std::size_t>(ky * kk + kx), static_cast<std::uint32_t>(i));
      if (site.empty()) continue;
      const auto o = static_cast<std::uint32_t>(out.out_coords.size());
      out.out_coords.push_back(Coord{ox, oy});
      for (const auto& [k, i] : site) out.pairs[k].emplace(i, o);
    }
  return out;
}

BruteAttnRulebook brute_force_attn_rulebook(std::span<const Coord> coords, int window_side, Shift shift,
                                            std::size_t num_ctx) {
  if (coords.size() > kBruteForceMaxTokens)
    throw Error(ErrorCode::TooLarge, std::to_string(coords.size()) + " tokens exceeds the brute-force guard");
  if (coords.empty()) throw Error(ErrorCode::EmptyMap, "no tokens");
  BruteAttnRulebook rb;
  const std::size_t n = coords.size();
  rb.n_tokens = n;
  rb.num_ctx = num_ctx;
  int lo_x = coords[0].x, hi_x = coords[0].x, lo_y = coords[0].y, hi_y = coords[0].y;
  for (const Coord& c : coords) {
    lo_x = std::min(lo_x, c.x);
    hi_x = std::max(hi_x, c.x);
    lo_y = std::min(lo_y, c.y);
    hi_y = std::max(hi_y, c.y);
  }
  const bool everything = hi_x - lo_x + 1 <= window_side && hi_y - lo_y + 1 <= window_side;
  const int pad = shift == Shift::half ? window_side / 2 : 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool same = (coords[i].x + pad) / window_side == (coords[j].x + pad) / window_side &&
                        (coords[i].y + pad) / window_side == (coords[j].y + pad) / window_side;
      if (everything || same) rb.local.emplace(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < num_ctx; ++b) {
      rb.global.emplace(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(n + b));
      rb.global.emplace(static_cast<std::uint32_t>(n + b), static_cast<std::uint32_t>(i));
    }
  return rb;
}

AttentionMasks masks_from(const BruteAttnRulebook& rb) {
  AttentionMasks m;
  m.rows = rb.n_tokens + rb.num_ctx;
  m.local.assign(m.rows * m.rows, 0);
  m.global.assign(m.rows * m.rows, 0);
  for (const auto& [q, k] : rb.local) m.local[q * m.rows + k] = 1;
  for (const auto& [q, k] : rb.global) m.global[q * m.rows + k] = 1;
  return m;
}

bool same_pairs(const ConvRulebook& fast, const BruteConvRulebook& brute) {
  if (fast.out_coords != brute.out_coords || fast.pairs.size() != brute.pairs.size()) return false;
  for (std::size_t k = 0; k < fast.pairs.size(); ++k) {
    PairSet got;
    for (const RulePair& p : fast.pairs[k]) got.emplace(p.in, p.out);
    if (got.size() != fast.pairs[k].size() || got != brute.pairs[k]) return false;
  }
  return true;
}

bool same_pairs(const AttnRulebook& fast, const BruteAttnRulebook& brute) {
  if (fast.n_tokens != brute.n_tokens || fast.num_ctx != brute.num_ctx) return false;
  PairSet local, global;
  for (std::size_t q = 0; q < fast.local.num_queries(); ++q)
    for (std::uint32_t k : fast.local.keys_of(q)) local.emplace(static_cast<std::uint32_t>(q), k);
  for (std::size_t q = 0; q < fast.global.num_queries(); ++q)
    for (std::uint32_t k : fast.global.keys_of(q)) global.emplace(static_cast<std::uint32_t>(q), k);
  return local.size() == fast.local.num_pairs() && global.size() == fast.global.num_pairs() &&
         local == brute.local && global == brute.global;
}

Fault parse_fault(const std::string& name) {
  if (name.empty() || name == "none") return Fault::none;
  if (name == "conv") return Fault::conv;
  if (name == "attention") return Fault::attention;
  if (name == "rulebook") return Fault::rulebook;
  if (name == "gradient") return Fault::gradient;
  throw Error(ErrorCode::InvalidArgument, "unknown fault '" + name + "' (conv, attention, rulebook, gradient)");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<Coord> random_coords(std::mt19937_64& rng, int width, int height, std::size_t n) {
  std::vector<Coord> all;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) all.push_back(Coord{x, y});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(n, all.size()));
  std::sort(all.begin(), all.end());
  return all;
}

template <class T>
void fill_normal(std::span<T> out, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  for (T& v : out) v = static_cast<T>(dist(rng));
}

int pick(std::mt19937_64& rng, std::initializer_list<int> options) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return *(options.begin() + d(rng));
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <class T>
double conv_trial(std::mt19937_64& rng, Fault fault, bool first) {
  const int side = uniform_int(rng, 2, 32);
  const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, side * side));
  const std::vector<Coord> coords = random_coords(rng, side, side, n);
  ConvSpec spec;
  spec.kernel = pick(rng, {1, 2, 3});
  spec.stride = pick(rng, {1, 2});
  spec.dilation = pick(rng, {1, 2});
  spec.in_dim = static_cast<std::size_t>(uniform_int(rng, 1, 8));
  spec.out_dim = static_cast<std::size_t>(uniform_int(rng, 1, 8));

  Matrix<double> feats(n, spec.in_dim);
  fill_normal<double>(feats.flat(), rng);
  std::vector<double> w(static_cast<std::size_t>(spec.kernel * spec.kernel) * spec.in_dim * spec.out_dim);
  std::vector<double> b(spec.out_dim);
  fill_normal<double>(w, rng, 0.5);
  fill_normal<double>(b, rng, 0.5);

  const SparseMap<double> map64 = build_sparse_map(coords, feats);
  const SparseMap<T> map = map64.template cast<T>();
  std::vector<T> wt(w.begin(), w.end()), bt(b.begin(), b.end());
  const ConvRulebook rb = build_conv_rulebook(map.coords, spec);
  SparseMap<T> fast = sac_forward(map, rb, ConvParams<T>{wt, bt, spec.in_dim, spec.out_dim});
  if (fault == Fault::conv && first) fast.features(0, 0) += T(1e-3);

  const std::size_t reach = static_cast<std::size_t>((spec.kernel - 1) * spec.dilation);
  const DenseTensor<double> dense_in = embed_dense(map64, static_cast<std::size_t>(side) + reach,
                                                   static_cast<std::size_t>(side) + reach);
  const DenseTensor<double> dense =
      dense_conv_oracle(dense_in, spec.kernel, spec.stride, spec.dilation,
                        ConvParams<double>{w, b, spec.in_dim, spec.out_dim});
  double err = 0.0;
  for (std::size_t i = 0; i < fast.size(); ++i) {
    const auto y = static_cast<std::size_t>(fast.coords[i].y), x = static_cast<std::size_t>(fast.coords[i].x);
    for (std::size_t o = 0; o < spec.out_dim; ++o)
      err = std::max(err, std::abs(static_cast<double>(fast.features(i, o)) - dense.at(y, x, o)));
  }
  return err;
}

}  // namespace

CheckResult check_conv_oracle(std::size_t trials, std::uint64_t seed, bool single_precision, Fault fault) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = single_precision ? "conv_oracle_f32" : "conv_oracle_f64";
  r.tolerance = single_precision ? 1e-5 : 1e-10;
  r.trials = trials;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t)
    r.max_error = std::max(r.max_error, single_precision ? conv_trial<float>(rng, fault, t == 0)
                                                         : conv_trial<double>(rng, fault, t == 0));
  r.passed = r.max_error < r.tolerance;
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_attention_oracle(std::size_t trials, std::uint64_t seed, Fault fault) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = "attention_oracle_f32";
  r.tolerance = 1e-5;
  r.trials = trials;
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const int side = uniform_int(rng, 1, 16);
    const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, std::min(64, side * side)));
    const std::vector<Coord> coords = random_coords(rng, side, side, n);
    const int w_side = pick(rng, {2, 4});
    const Shift shift = uniform_int(rng, 0, 1) == 0 ? Shift::none : Shift::half;
    const auto heads = static_cast<std::size_t>(pick(rng, {1, 4}));
    const auto num_ctx = static_cast<std::size_t>(uniform_int(rng, 0, 1));
    const std::size_t dim = heads * static_cast<std::size_t>(pick(rng, {1, 2}));
    const std::size_t rows = n + num_ctx;

    std::vector<std::vector<double>> p64(9);
    for (int i = 0; i < 8; ++i) {
      p64[static_cast<std::size_t>(i)].resize(i % 2 == 0 ? dim * dim : dim);
      fill_normal<double>(p64[static_cast<std::size_t>(i)], rng, 0.5);
    }
    p64[8].resize(rpb_rows(w_side) * heads);
    fill_normal<double>(p64[8], rng, 0.5);
    Matrix<double> h(rows, dim);
    fill_normal<double>(h.flat(), rng);

    std::vector<std::vector<float>> p32;
    for (const auto& v : p64) p32.emplace_back(v.begin(), v.end());
    auto view = [&](auto& p) {
      using V = typename std::decay_t<decltype(p[0])>::value_type;
      return AttentionParams<V>{p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], dim, heads};
    };

    const AttnRulebook rb = build_attention_rulebook(coords, w_side, shift, num_ctx);
    Matrix<float> fast = attention_forward(h.cast<float>(), coords, rb, view(p32));
    if (fault == Fault::attention && t == 0) fast(0, 0) += 1e-3f;
    const AttentionMasks masks = masks_from(brute_force_attn_rulebook(coords, w_side, shift, num_ctx));
    const Matrix<double> dense = dense_attention_oracle(h, coords, masks, view(p64), w_side);
    for (std::size_t i = 0; i < dense.size(); ++i)
      r.max_error = std::max(r.max_error, std::abs(static_cast<double>(fast.data()[i]) - dense.data()[i]));
  }
  r.passed = r.max_error < r.tolerance;
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_conv_rulebooks(std::size_t trials, std::uint64_t seed, Fault fault) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = "conv_rulebook_set_equality";
  r.trials = trials;
  std::mt19937_64 rng(seed);
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const int side = uniform_int(rng, 1, 32);
    const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, std::min(200, side * side)));
    const std::vector<Coord> coords = random_coords(rng, side, side, n);
    ConvSpec spec;
    spec.kernel = pick(rng, {1, 2, 3});
    spec.stride = pick(rng, {1, 2});
    spec.dilation = pick(rng, {1, 2});
    spec.in_dim = spec.out_dim = 1;
    ConvRulebook fast = build_conv_rulebook(coords, spec);
    if (fault == Fault::rulebook && t == 0)
      for (auto& list : fast.pairs)
        if (!list.empty()) {
          list.pop_back();
          break;
        }
    if (!same_pairs(fast, brute_force_conv_rulebook(coords, spec))) ++mismatches;
  }
  r.max_error = static_cast<double>(mismatches);
  r.passed = mismatches == 0;
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_attention_rulebooks(std::size_t trials, std::uint64_t seed, Fault fault) {
  const auto t0 = Clock::now();
  CheckResult r;
  r.name = "attention_rulebook_set_equality";
  r.trials = trials;
  std::mt19937_64 rng(seed);
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const int side = uniform_int(rng, 1, 32);
    const std::size_t n = static_cast<std::size_t>(uniform_int(rng, 1, std::min(200, side * side)));
    const std::vector<Coord> coords = random_coords(rng, side, side, n);
    const int w_side = pick(rng, {2, 4});
    const Shift shift = uniform_int(rng, 0, 1) == 0 ? Shift::none : Shift::half;
    const auto num_ctx = static_cast<std::size_t>(uniform_int(rng, 0, 1));
    AttnRulebook fast = build_attention_rulebook(coords, w_side, shift, num_ctx);
    if (fault == Fault::rulebook && t == 0) {
      fast.local.keys.pop_back();
      fast.local.offsets.back() -= 1;
    }
    if (!same_pairs(fast, brute_force_attn_rulebook(coords, w_side, shift, num_ctx))) ++mismatches;
  }
  r.max_error = static_cast<double>(mismatches);
  r.passed = mismatches == 0;
  r.seconds = seconds_since(t0);
  return r;
}

namespace {

// Scalar sum(R .* y) with a fixed random R, so every output coordinate feeds the loss.
NodeId probe(Tape<double>& tape, NodeId y, std::uint64_t seed) {
  const Matrix<double>& v = tape.value(y);
  auto r = std::make_shared<Matrix<double>>(v.rows(), v.cols());
  std::mt19937_64 rng(seed);
  fill_normal<double>(r->flat(), rng);
  Matrix<double> s(1, 1);
  for (std::size_t i = 0; i < v.size(); ++i) s(0, 0) += (*r).data()[i] * v.data()[i];
  return tape.record(std::move(s), [y, r, self = tape.size()](Tape<double>& t) {
    const double g = t.grad(self)(0, 0);
    Matrix<double>& gy = t.grad(y);
    for (std::size_t i = 0; i < gy.size(); ++i) gy.data()[i] += g * (*r).data()[i];
  });
}

// Identity whose backward is deliberately wrong; the negative control for grad_check.
NodeId corrupted_identity(Tape<double>& tape, NodeId x) {
  return tape.record(tape.value(x), [x, self = tape.size()](Tape<double>& t) {
    const Matrix<double>& g = t.grad(self);
    Matrix<double>& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.data()[i] += 1.5 * g.data()[i];
  });
}

Param<double>& random_param(ParamStore<double>& store, const std::string& name, std::size_t rows, std::size_t cols,
                            std::mt19937_64& rng, double sd = 0.5) {
  Param<double>& p = store.add(name, rows, cols);
  fill_normal<double>(p.value.flat(), rng, sd);
  return p;
}

// Input rows as a parameter so dL/dx is checked too.
NodeId input_node(Tape<double>& tape, Param<double>& x) {
  return ops::add_param_rows(tape, tape.constant(Matrix<double>(x.value.rows(), x.value.cols())), 0, x);
}

void perturb(ParamStore<double>& store, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> dist(0.0, sd);
  for (auto& p : store.params())
    if (!p.frozen)
      for (double& v : p.value.storage()) v += dist(rng);
}

// Ridders-extrapolated central differences: a fixed step either leaves
// truncation near 1e-4 on LayerNorm-heavy composites or pushes rounding noise
// above 1e-4 on 1e-8-sized gradients.
constexpr double kGradEps = 1e-3;

CheckResult run_grad(const std::string& name, const LossFn<double>& fn, ParamStore<double>& store,
                     std::uint64_t seed) {
  const auto t0 = Clock::now();
  const GradCheckReport rep = grad_check(fn, store, kGradEps, 200, seed, FiniteDifference::ridders);
  CheckResult r;
  r.name = "grad_" + name;
  r.max_error = rep.max_rel_error;
  r.tolerance = 1e-4;
  r.trials = rep.coords_checked;
  r.passed = rep.max_rel_error < r.tolerance;
  r.seconds = seconds_since(t0);
  std::ostringstream ss;
  ss << rep.worst_param << "[" << rep.worst_index << "] analytic=" << rep.worst_analytic
     << " numeric=" << rep.worst_numeric;
  r.detail = ss.str();
  return r;
}

SparseMap<double> random_map(std::mt19937_64& rng, int side, std::size_t n, std::size_t dim, std::size_t num_ctx) {
  Matrix<double> feats(std::min<std::size_t>(n, static_cast<std::size_t>(side * side)), dim);
  fill_normal<double>(feats.flat(), rng);
  SparseMap<double> map = build_sparse_map(random_coords(rng, side, side, n), feats, num_ctx);
  fill_normal<double>(map.context.flat(), rng);
  return map;
}

}  // namespace

std::vector<CheckResult> check_gradients(std::uint64_t seed, Fault fault) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(seed);
  const bool corrupt = fault == Fault::gradient;

  {
    ParamStore<double> s;
    Param<double>& x = random_param(s, "x", 6, 5, rng);
    Param<double>& w = random_param(s, "w", 3, 5, rng);
    Param<double>& b = random_param(s, "b", 1, 3, rng);
    out.push_back(run_grad("linear", [&](Tape<double>& t) {
      NodeId y = ops::linear(t, input_node(t, x), w, &b);
      if (corrupt) y = corrupted_identity(t, y);
      return probe(t, y, 1);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    Param<double>& x = random_param(s, "x", 5, 6, rng);
    Param<double>& sc = random_param(s, "scale", 1, 6, rng);
    Param<double>& sh = random_param(s, "shift", 1, 6, rng);
    out.push_back(run_grad("layer_norm", [&](Tape<double>& t) {
      return probe(t, ops::layer_norm(t, input_node(t, x), sc, sh), 2);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    Param<double>& x = random_param(s, "x", 4, 5, rng, 1.5);
    out.push_back(run_grad("gelu", [&](Tape<double>& t) { return probe(t, ops::gelu(t, input_node(t, x)), 3); }, s,
                           seed));
  }
  {
    ParamStore<double> s;
    Param<double>& a = random_param(s, "a", 4, 3, rng);
    Param<double>& b = random_param(s, "b", 4, 3, rng);
    Param<double>& c = random_param(s, "c", 4, 2, rng);
    out.push_back(run_grad("row_ops", [&](Tape<double>& t) {
      NodeId xa = input_node(t, a), xb = input_node(t, b), xc = input_node(t, c);
      NodeId cat = ops::concat_cols(t, ops::add(t, xa, xb), xc);
      NodeId sum = ops::sum_rows(t, cat, 1, 2);
      NodeId mean = ops::mean_rows(t, ops::slice_rows(t, cat, 0, 3), 0, 3);
      return probe(t, ops::add(t, sum, mean), 4);
    }, s, seed));
  }
  // SAC: downsampling with a mapped context row, and a same-width dilated conv with pass-through context.
  const struct {
    const char* name;
    int k, st, dil;
    std::size_t din, dout;
  } convs[] = {{"sac_k2s2", 2, 2, 1, 3, 5}, {"sac_k3s1d2", 3, 1, 2, 4, 4}};
  for (const auto& cv : convs) {
    ParamStore<double> s;
    const SparseMap<double> map = random_map(rng, 6, 18, cv.din, 1);
    Param<double>& x = random_param(s, "x", map.size() + 1, cv.din, rng);
    ConvSpec spec{cv.k, cv.st, cv.dil, cv.din, cv.dout, ConvKind::forward};
    auto rb = std::make_shared<const ConvRulebook>(build_conv_rulebook(map.coords, spec));
    Param<double>& w = random_param(s, "w", static_cast<std::size_t>(cv.k * cv.k) * cv.dout, cv.din, rng);
    Param<double>& b = random_param(s, "b", 1, cv.dout, rng);
    out.push_back(run_grad(cv.name, [&, rb](Tape<double>& t) {
      return probe(t, ops::sac(t, input_node(t, x), 1, rb, w, b), 5);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    const SparseMap<double> map = random_map(rng, 6, 18, 3, 1);
    ConvSpec spec{2, 2, 1, 3, 3, ConvKind::forward};
    const ConvRulebook fwd = build_conv_rulebook(map.coords, spec);
    auto rb = std::make_shared<const ConvRulebook>(transpose_rulebook(fwd, map.coords));
    Param<double>& x = random_param(s, "x", fwd.n_out() + 1, 4, rng);
    Param<double>& w = random_param(s, "w", 4 * 3, 4, rng);
    Param<double>& b = random_param(s, "b", 1, 3, rng);
    out.push_back(run_grad("sac_transposed", [&, rb](Tape<double>& t) {
      return probe(t, ops::sac(t, input_node(t, x), 1, rb, w, b), 6);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    const SparseMap<double> map = random_map(rng, 5, 14, 4, 1);
    auto coords = std::make_shared<const std::vector<Coord>>(map.coords);
    Param<double>& x = random_param(s, "x", map.size() + 1, 4, rng);
    CarParams<double> car = register_car(s, "car", 4, 2, 2, true, true, rng);
    perturb(s, rng, 0.3);
    auto rb = std::make_shared<const AttnRulebook>(build_attention_rulebook(map.coords, 2, Shift::half, 1));
    out.push_back(run_grad("attention", [&, rb, coords](Tape<double>& t) {
      return probe(t, ops::attention(t, input_node(t, x), coords, rb, car.regular), 7);
    }, s, seed));
    out.push_back(run_grad("car_block", [&, coords](Tape<double>& t) {
      return probe(t, ops::car_block(t, input_node(t, x), coords, 1, car), 8);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    Param<double>& z = random_param(s, "logits", 5, 3, rng);
    const std::vector<int> labels{0, 2, 1, 1, 0};
    out.push_back(run_grad("softmax_ce", [&](Tape<double>& t) {
      return ops::softmax_cross_entropy(t, input_node(t, z), labels);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    Param<double>& z = random_param(s, "logits", 7, 2, rng);
    const std::vector<std::uint8_t> mask{0, 1, 1, 0, 1, 0, 0};
    const LossSpec spec{LossKind::hybrid, 0.75, 1.0, 3};
    out.push_back(run_grad("hybrid_loss", [&](Tape<double>& t) {
      return ops::hybrid_segmentation_loss(t, input_node(t, z), mask, spec);
    }, s, seed));
  }
  {
    ParamStore<double> s;
    Param<double>& z = random_param(s, "logits", 4, 3, rng);
    const std::vector<int> labels{0, 2, 1, 1};
    const std::vector<int> censor{0, 0, 1, 0};
    out.push_back(run_grad("survival_nll", [&](Tape<double>& t) {
      return ops::survival_nll(t, input_node(t, z), labels, censor);
    }, s, seed));
  }
  for (const bool with_ctx : {true, false}) {
    ModelConfig cfg;
    cfg.in_dim = 3;
    cfg.dims = {4, 8};
    cfg.window_side = 2;
    cfg.heads = 2;
    cfg.seed = seed;
    cfg.ablation.no_ctx = !with_ctx;
    SpanModel<double> model(cfg);
    perturb(model.params(), rng, 0.1);
    const SparseMap<double> map = random_map(rng, 6, 16, 3, 0);
    out.push_back(run_grad(with_ctx ? "span_mil" : "span_mil_mean_pool",
                           [&](Tape<double>& t) { return model.mil_loss(t, map, 1); }, model.params(), seed));
  }
  {
    ModelConfig cfg;
    cfg.in_dim = 3;
    cfg.dims = {4, 8};
    cfg.window_side = 2;
    cfg.heads = 2;
    cfg.head = HeadKind::unet;
    cfg.loss.kind = LossKind::hybrid;
    cfg.seed = seed;
    SpanModel<double> model(cfg);
    perturb(model.params(), rng, 0.1);
    const SparseMap<double> map = random_map(rng, 6, 16, 3, 0);
    std::vector<std::uint8_t> mask(map.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = map.coords[i].x < 3 ? 1 : 0;
    out.push_back(run_grad("span_unet", [&](Tape<double>& t) { return model.unet_loss(t, map, mask); },
                           model.params(), seed));
  }
  return out;
}

std::vector<CheckResult> run_oracle_suite(std::uint64_t seed, std::size_t trials, Fault fault) {
  std::vector<CheckResult> out;
  if (trials == 0) return out;
  out.push_back(check_conv_oracle(trials, seed, true, fault));
  out.push_back(check_conv_oracle(trials, seed + 1, false, fault));
  out.push_back(check_attention_oracle(trials, seed + 2, fault));
  out.push_back(check_conv_rulebooks(trials, seed + 3, fault));
  out.push_back(check_attention_rulebooks(trials, seed + 4, fault));
  for (CheckResult& r : check_gradients(seed + 5, fault)) out.push_back(std::move(r));
  return out;
}

template DenseTensor<float> embed_dense(const SparseMap<float>&, std::size_t, std::size_t);
template DenseTensor<double> embed_dense(const SparseMap<double>&, std::size_t, std::size_t);
template DenseTensor<float> dense_conv_oracle(const DenseTensor<float>&, int, int, int, const ConvParams<float>&);
template DenseTensor<double> dense_conv_oracle(const DenseTensor<double>&, int, int, int, const ConvParams<double>&);
template Matrix<float> dense_attention_oracle(const Matrix<float>&, std::span<const Coord>, const AttentionMasks&,
                                              const AttentionParams<float>&, int);
template Matrix<double> dense_attention_oracle(const Matrix<double>&, std::span<const Coord>, const AttentionMasks&,
                                               const AttentionParams<double>&, int);

}  // namespace span
