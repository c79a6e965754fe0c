#pragma once

// SAC-CAR backbone plus the two task heads:
//   encoder  stage 0: 1x1 SAC projection, stages >= 1: K=S=2 SAC; each followed by CAR pairs
//   MIL      softmax(W_cls * sum_l h_l^g + b_cls) over the per-stage context tokens
//   UNet     CAR then transposed SAC per level, skip-merged with the matching encoder map

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "span/attention.hpp"
#include "span/autodiff.hpp"
#include "span/conv.hpp"
#include "span/losses.hpp"
#include "span/sparse_map.hpp"

namespace span {

enum class HeadKind { mil, unet };
enum class SkipMode { concat, add, none };

struct Ablation {
  bool no_sac = false;
  bool no_car = false;
  bool no_shift = false;
  bool no_ctx = false;
  bool no_rpb = false;

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct StageSpec {
  ConvSpec conv;
  int window_side = 0;  // 0 disables CAR
  std::size_t heads = 1;
  bool shift = true;
  int car_pairs = 1;
};

struct ModelConfig {
  std::size_t in_dim = 16;
  std::vector<std::size_t> dims{64, 128, 256};
  int window_side = 4;
  std::size_t heads = 4;
  int car_pairs = 1;
  std::size_t num_ctx = 1;
  HeadKind head = HeadKind::mil;
  std::size_t num_classes = 2;
  SkipMode skip = SkipMode::concat;
  Ablation ablation;
  LossSpec loss;
  std::uint64_t seed = 0;

  std::size_t effective_num_ctx() const noexcept { return ablation.no_ctx ? 0 : num_ctx; }
  std::size_t num_stages() const noexcept { return dims.size(); }
  std::vector<StageSpec> stages() const;
  // Coordinate translation period under which every stage's rulebooks are
  // invariant: product of strides times the window side.
  int translation_period() const;
  void validate() const;
};

// Values materialised from one encoder pass.
template <class T>
struct EncoderOutput {
  std::vector<SparseMap<T>> stage_maps;      // post-CAR, context rows included
  std::vector<Matrix<T>> stage_globals;      // num_ctx x d_l per stage
  std::vector<ConvRulebook> stage_rulebooks;  // forward rulebook that produced stage l
  std::vector<Coord> input_coords;
};

template <class T>
struct SegmentationOutput {
  std::vector<Coord> coords;
  Matrix<T> logits;  // N x num_classes, row i for coords[i]
};

template <class T>
class SpanModel {
 public:
  // Tape-level handles for one encoder pass.
  struct Trace {
    std::vector<NodeId> stage_nodes;
    std::vector<std::shared_ptr<const std::vector<Coord>>> stage_coords;
    std::vector<std::shared_ptr<const ConvRulebook>> rulebooks;
    std::shared_ptr<const std::vector<Coord>> input_coords;
    std::size_t num_ctx = 0;
  };

  explicit SpanModel(ModelConfig config);
  SpanModel(const SpanModel&) = delete;
  SpanModel& operator=(const SpanModel&) = delete;
  SpanModel(SpanModel&&) noexcept = default;

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }

  Trace encode(Tape<T>& tape, const SparseMap<T>& input);
  // Re-enters materialised encoder values as tape constants.
  Trace import_encoder(Tape<T>& tape, const EncoderOutput<T>& enc) const;
  // 1 x num_classes logits. Falls back to mean-pooled final-stage patches when num_ctx = 0.
  NodeId mil_logits(Tape<T>& tape, const Trace& trace);
  // N_input x num_classes logits in the input map's canonical order.
  NodeId unet_logits(Tape<T>& tape, const Trace& trace);

  // Builds the configured task loss on the tape.
  NodeId mil_loss(Tape<T>& tape, const SparseMap<T>& input, int label);
  NodeId unet_loss(Tape<T>& tape, const SparseMap<T>& input, std::span<const std::uint8_t> mask);

  std::vector<T> predict_proba(const SparseMap<T>& input);
  SegmentationOutput<T> predict_segmentation(const SparseMap<T>& input);

 private:
  struct StageParams {
    Param<T>* sac_weight = nullptr;
    Param<T>* sac_bias = nullptr;
    std::vector<CarParams<T>> car;
  };

  NodeId stack_input(Tape<T>& tape, const SparseMap<T>& input) const;

  ModelConfig config_;
  std::vector<StageSpec> stages_;
  ParamStore<T> store_;
  std::vector<StageParams> encoder_;
  Param<T>* ctx_token_ = nullptr;
  std::vector<Param<T>*> mil_proj_;
  Param<T>* cls_weight_ = nullptr;
  Param<T>* cls_bias_ = nullptr;
  std::vector<StageParams> decoder_;
  Param<T>* seg_weight_ = nullptr;
  Param<T>* seg_bias_ = nullptr;
};

template <class T>
EncoderOutput<T> encoder_forward(const SparseMap<T>& map, SpanModel<T>& model);

// Throws MissingContext when the encoder ran without context tokens.
template <class T>
std::vector<T> mil_head(const EncoderOutput<T>& enc, SpanModel<T>& model);

// Throws RulebookMissing when enc lacks a rulebook per stage.
template <class T>
SegmentationOutput<T> unet_decode(const EncoderOutput<T>& enc, SpanModel<T>& model);

}  // namespace span
