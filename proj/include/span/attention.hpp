#pragma once

// Windowed sparse attention with a global context token (the CAR operator).
//
// Local pairs connect tokens that share a W_side x W_side block of the dense
// index grid (self-pairs included); global pairs connect every patch token
// with every context token in both directions. Local and global scores are
// soft-maxed separately and their outputs summed.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "span/autodiff.hpp"
#include "span/matrix.hpp"
#include "span/sparse_map.hpp"

namespace span {

enum class Shift { none, half };

struct WindowSet {
  // Zero-based token indices per non-empty block, blocks in row-major order.
  std::vector<std::vector<std::uint32_t>> windows;
  Shift shift = Shift::none;
  int window_side = 0;
};

WindowSet generate_windows(const DenseIndexGrid& grid, int window_side, Shift shift);

// Query-major compressed pair list: keys of query q are keys[offsets[q] .. offsets[q+1]).
struct PairList {
  std::vector<std::uint32_t> offsets;
  std::vector<std::uint32_t> keys;

  std::size_t num_queries() const noexcept { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t num_pairs() const noexcept { return keys.size(); }
  std::span<const std::uint32_t> keys_of(std::size_t q) const noexcept {
    return {keys.data() + offsets[q], offsets[q + 1] - offsets[q]};
  }
  friend bool operator==(const PairList&, const PairList&) = default;
};

struct AttnRulebook {
  PairList local;   // over n_tokens + num_ctx queries; context queries have no local keys
  PairList global;  // over n_tokens + num_ctx queries
  std::vector<std::uint32_t> local_bias_index;  // RPB row per local pair
  std::size_t n_tokens = 0;
  std::size_t num_ctx = 0;
  int window_side = 0;
  bool compact = false;  // occupied extent fits one block: full local attention
};

// RPB row for a query-key offset (dx, dy) = p_q - p_k.
inline std::size_t rpb_index(int dx, int dy, int window_side) noexcept {
  const int span = 2 * window_side - 1;
  return static_cast<std::size_t>((dx + window_side - 1) * span + (dy + window_side - 1));
}
inline std::size_t rpb_rows(int window_side) noexcept {
  const auto s = static_cast<std::size_t>(2 * window_side - 1);
  return s * s;
}

AttnRulebook build_attention_rulebook(std::span<const Coord> coords, int window_side, Shift shift,
                                      std::size_t num_ctx);

template <class T>
struct AttentionParams {
  std::span<const T> wq, bq, wk, bk, wv, bv, wo, bo;
  std::span<const T> rpb;  // rpb_rows(W) x heads
  std::size_t dim = 0;
  std::size_t heads = 1;
};

template <class T>
struct AttentionGrads {
  std::span<T> wq, bq, wk, bk, wv, bv, wo, bo, rpb;
};

template <class T>
struct AttentionCache {
  Matrix<T> x, q, k, v, mixed;
  std::vector<T> p_local;   // [pair * heads + head]
  std::vector<T> p_global;  // [pair * heads + head]
};

// h holds n_tokens patch rows followed by num_ctx context rows.
template <class T>
Matrix<T> attention_forward(const Matrix<T>& h, std::span<const Coord> coords, const AttnRulebook& rb,
                            const AttentionParams<T>& params, AttentionCache<T>* cache = nullptr);

// Accumulates parameter gradients (including the RPB scatter-add) and returns dL/dh.
template <class T>
Matrix<T> attention_backward(const Matrix<T>& grad_out, const AttentionCache<T>& cache, const AttnRulebook& rb,
                             const AttentionParams<T>& params, AttentionGrads<T> grads);

// Parameters of one pre-norm transformer sub-block: x += Attn(LN(x)); x += FFN(LN(x)).
template <class T>
struct CarBlockParams {
  Param<T>* norm1_scale = nullptr;
  Param<T>* norm1_shift = nullptr;
  Param<T>* wq = nullptr;
  Param<T>* bq = nullptr;
  Param<T>* wk = nullptr;
  Param<T>* bk = nullptr;
  Param<T>* wv = nullptr;
  Param<T>* bv = nullptr;
  Param<T>* wo = nullptr;
  Param<T>* bo = nullptr;
  Param<T>* rpb = nullptr;
  Param<T>* norm2_scale = nullptr;
  Param<T>* norm2_shift = nullptr;
  Param<T>* ffn_w1 = nullptr;
  Param<T>* ffn_b1 = nullptr;
  Param<T>* ffn_w2 = nullptr;
  Param<T>* ffn_b2 = nullptr;
  std::size_t heads = 1;

  AttentionParams<T> attention_view() const;
  AttentionGrads<T> attention_grads() const;
};

// A regular-window sub-block followed by a shifted-window sub-block.
template <class T>
struct CarParams {
  CarBlockParams<T> regular;
  CarBlockParams<T> shifted;
  int window_side = 0;
  bool shift_enabled = true;
};

inline constexpr std::size_t kFfnExpansion = 4;

// Registers a sub-block under prefix. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
// biases and RPB zero, norm scale 1 / shift 0. rpb_enabled=false freezes the table at zero.
template <class T>
CarBlockParams<T> register_car_block(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                                     std::size_t heads, int window_side, bool rpb_enabled, std::mt19937_64& rng);

template <class T>
CarParams<T> register_car(ParamStore<T>& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                          int window_side, bool shift_enabled, bool rpb_enabled, std::mt19937_64& rng);

namespace ops {

template <class T>
NodeId attention(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords,
                 std::shared_ptr<const AttnRulebook> rb, const CarBlockParams<T>& params);

template <class T>
NodeId car_sub_block(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords,
                     std::shared_ptr<const AttnRulebook> rb, const CarBlockParams<T>& params);

// Full CAR pair on a stacked (N + num_ctx) x d node. window_side == 0 is the identity.
template <class T>
NodeId car_block(Tape<T>& tape, NodeId x, std::shared_ptr<const std::vector<Coord>> coords, std::size_t num_ctx,
                 const CarParams<T>& params);

}  // namespace ops

// Map-level convenience wrapper around ops::car_block.
template <class T>
SparseMap<T> car_block_forward(const SparseMap<T>& map, const CarParams<T>& params);

}  // namespace span
