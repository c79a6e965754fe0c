#include "span/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "span/error.hpp"
#include "span/nn.hpp"

namespace span {

std::vector<StageSpec> ModelConfig::stages() const {
  std::vector<StageSpec> out;
  std::size_t prev = in_dim;
  for (std::size_t e = 0; e < dims.size(); ++e) {
    StageSpec s;
    const bool down = e > 0 && !ablation.no_sac;
    s.conv.kernel = down ? 2 : 1;
    s.conv.stride = down ? 2 : 1;
    s.conv.dilation = 1;
    s.conv.in_dim = prev;
    s.conv.out_dim = dims[e];
    s.window_side = ablation.no_car ? 0 : window_side;
    s.heads = heads;
    s.shift = !ablation.no_shift;
    s.car_pairs = car_pairs;
    out.push_back(s);
    prev = dims[e];
  }
  return out;
}

int ModelConfig::translation_period() const {
  int period = 1;
  for (const StageSpec& s : stages()) period *= s.conv.stride;
  return period * std::max(window_side, 1);
}

void ModelConfig::validate() const {
  if (in_dim == 0) throw Error(ErrorCode::ConfigError, "in_dim must be positive");
  if (dims.empty()) throw Error(ErrorCode::ConfigError, "at least one stage is required");
  for (std::size_t d : dims) {
    if (d == 0) throw Error(ErrorCode::ConfigError, "stage widths must be positive");
    if (heads == 0 || d % heads != 0) throw Error(ErrorCode::ConfigError, "stage width not divisible by heads");
  }
  if (window_side < 0) throw Error(ErrorCode::ConfigError, "window_side must be >= 0");
  if (window_side > 0 && !ablation.no_shift && window_side % 2 != 0)
    throw Error(ErrorCode::ConfigError, "shifted windows need an even window_side");
  if (car_pairs < 0) throw Error(ErrorCode::ConfigError, "car_pairs must be >= 0");
  if (num_classes < 2 && loss.kind != LossKind::survival)
    throw Error(ErrorCode::ConfigError, "num_classes must be >= 2");
  if (head == HeadKind::unet && loss.kind == LossKind::hybrid && num_classes != 2)
    throw Error(ErrorCode::ConfigError, "hybrid loss is defined for two segmentation classes");
  if (loss.lambda < 0.0 || loss.lambda > 1.0) throw Error(ErrorCode::ConfigError, "lambda outside [0,1]");
}

namespace {

template <class T>
Param<T>& conv_param(ParamStore<T>& store, const std::string& name, const ConvSpec& spec, std::mt19937_64& rng) {
  const auto kk = static_cast<std::size_t>(spec.kernel * spec.kernel);
  Param<T>& p = store.add(name, kk * spec.out_dim, spec.in_dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(kk * spec.in_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : p.value.storage()) v = static_cast<T>(dist(rng));
  return p;
}

template <class T>
Param<T>& dense_param(ParamStore<T>& store, const std::string& name, std::size_t rows, std::size_t cols,
                      std::mt19937_64& rng) {
  Param<T>& p = store.add(name, rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : p.value.storage()) v = static_cast<T>(dist(rng));
  return p;
}

}  // namespace

template <class T>
SpanModel<T>::SpanModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  stages_ = config_.stages();
  std::mt19937_64 rng(config_.seed);
  const std::size_t num_stages = stages_.size();
  const bool rpb = !config_.ablation.no_rpb;

  for (std::size_t e = 0; e < num_stages; ++e) {
    const StageSpec& s = stages_[e];
    const std::string prefix = "stage" + std::to_string(e);
    StageParams sp;
    sp.sac_weight = &conv_param(store_, prefix + ".sac.weight", s.conv, rng);
    sp.sac_bias = &store_.add(prefix + ".sac.bias", 1, s.conv.out_dim);
    for (int p = 0; p < s.car_pairs && s.window_side > 0; ++p)
      sp.car.push_back(register_car(store_, prefix + ".car" + std::to_string(p), s.conv.out_dim, s.heads,
                                    s.window_side, s.shift, rpb, rng));
    encoder_.push_back(std::move(sp));
  }

  const std::size_t num_ctx = config_.effective_num_ctx();
  if (num_ctx > 0) {
    ctx_token_ = &store_.add("ctx_token", num_ctx, config_.dims.front());
    std::normal_distribution<double> dist(0.0, 0.02);
    for (T& v : ctx_token_->value.storage()) v = static_cast<T>(dist(rng));
  }

  const std::size_t d_last = config_.dims.back();
  if (config_.head == HeadKind::mil) {
    mil_proj_.assign(num_stages, nullptr);
    if (num_ctx > 0)
      for (std::size_t e = 0; e + 1 < num_stages; ++e)
        if (config_.dims[e] != d_last)
          mil_proj_[e] = &dense_param(store_, "mil.proj" + std::to_string(e), d_last, config_.dims[e], rng);
    cls_weight_ = &dense_param(store_, "mil.cls.weight", config_.num_classes, d_last, rng);
    cls_bias_ = &store_.add("mil.cls.bias", 1, config_.num_classes);
  } else {
    for (std::size_t j = 0; j < num_stages; ++j) {
      const std::size_t e = num_stages - 1 - j;
      const StageSpec& s = stages_[e];
      std::size_t width = config_.dims[e];
      if (j > 0 && config_.skip == SkipMode::concat) width *= 2;
      ConvSpec dec = s.conv;
      dec.in_dim = width;
      dec.out_dim = config_.dims[e == 0 ? 0 : e - 1];
      const std::string prefix = "dec" + std::to_string(j);
      StageParams sp;
      for (int p = 0; p < s.car_pairs && s.window_side > 0; ++p)
        sp.car.push_back(register_car(store_, prefix + ".car" + std::to_string(p), width, s.heads, s.window_side,
                                      s.shift, rpb, rng));
      sp.sac_weight = &conv_param(store_, prefix + ".sac.weight", dec, rng);
      sp.sac_bias = &store_.add(prefix + ".sac.bias", 1, dec.out_dim);
      decoder_.push_back(std::move(sp));
    }
    seg_weight_ = &dense_param(store_, "seg.weight", config_.num_classes, config_.dims.front(), rng);
    seg_bias_ = &store_.add("seg.bias", 1, config_.num_classes);
  }
}

template <class T>
NodeId SpanModel<T>::stack_input(Tape<T>& tape, const SparseMap<T>& input) const {
  if (input.size() == 0) throw Error(ErrorCode::EmptyMap, "model input has no tokens");
  if (input.feature_dim() != config_.in_dim)
    throw Error(ErrorCode::DimensionMismatch, "input feature_dim " + std::to_string(input.feature_dim()) +
                                                  " vs configured in_dim " + std::to_string(config_.in_dim));
  if (!is_canonical(input.coords)) throw Error(ErrorCode::InvalidArgument, "input map is not canonical");
  const std::size_t num_ctx = config_.effective_num_ctx();
  if (input.num_ctx() != num_ctx && input.num_ctx() != 0)
    throw Error(ErrorCode::DimensionMismatch, "input carries " + std::to_string(input.num_ctx()) +
                                                  " context rows, model expects " + std::to_string(num_ctx));
  Matrix<T> rows(input.size() + num_ctx, input.feature_dim());
  std::copy(input.features.storage().begin(), input.features.storage().end(), rows.data());
  if (input.num_ctx() == num_ctx)
    std::copy(input.context.storage().begin(), input.context.storage().end(), rows.data() + input.features.size());
  return tape.constant(std::move(rows));
}

template <class T>
typename SpanModel<T>::Trace SpanModel<T>::encode(Tape<T>& tape, const SparseMap<T>& input) {
  Trace tr;
  tr.num_ctx = config_.effective_num_ctx();
  tr.input_coords = std::make_shared<const std::vector<Coord>>(input.coords);
  NodeId x = stack_input(tape, input);
  auto coords = tr.input_coords;
  for (std::size_t e = 0; e < stages_.size(); ++e) {
    auto rb = std::make_shared<const ConvRulebook>(build_conv_rulebook(*coords, stages_[e].conv));
    x = ops::sac(tape, x, tr.num_ctx, rb, *encoder_[e].sac_weight, *encoder_[e].sac_bias);
    if (e == 0 && ctx_token_ != nullptr) x = ops::add_param_rows(tape, x, rb->n_out(), *ctx_token_);
    auto out_coords = std::make_shared<const std::vector<Coord>>(rb->out_coords);
    for (const CarParams<T>& car : encoder_[e].car) x = ops::car_block(tape, x, out_coords, tr.num_ctx, car);
    tr.stage_nodes.push_back(x);
    tr.stage_coords.push_back(out_coords);
    tr.rulebooks.push_back(rb);
    coords = out_coords;
  }
  return tr;
}

template <class T>
typename SpanModel<T>::Trace SpanModel<T>::import_encoder(Tape<T>& tape, const EncoderOutput<T>& enc) const {
  Trace tr;
  tr.num_ctx = config_.effective_num_ctx();
  tr.input_coords = std::make_shared<const std::vector<Coord>>(enc.input_coords);
  for (std::size_t e = 0; e < enc.stage_maps.size(); ++e) {
    const SparseMap<T>& m = enc.stage_maps[e];
    Matrix<T> rows(m.size() + m.num_ctx(), m.feature_dim());
    std::copy(m.features.storage().begin(), m.features.storage().end(), rows.data());
    std::copy(m.context.storage().begin(), m.context.storage().end(), rows.data() + m.features.size());
    tr.stage_nodes.push_back(tape.constant(std::move(rows)));
    tr.stage_coords.push_back(std::make_shared<const std::vector<Coord>>(m.coords));
  }
  for (const ConvRulebook& rb : enc.stage_rulebooks) tr.rulebooks.push_back(std::make_shared<const ConvRulebook>(rb));
  return tr;
}

template <class T>
NodeId SpanModel<T>::mil_logits(Tape<T>& tape, const Trace& tr) {
  if (config_.head != HeadKind::mil) throw Error(ErrorCode::ConfigError, "model was built with a UNet head");
  NodeId pooled = 0;
  if (tr.num_ctx > 0) {
    bool first = true;
    for (std::size_t e = 0; e < tr.stage_nodes.size(); ++e) {
      const std::size_t n = tr.stage_coords[e]->size();
      NodeId g = ops::sum_rows(tape, tr.stage_nodes[e], n, tr.num_ctx);
      if (mil_proj_[e] != nullptr) g = ops::linear<T>(tape, g, *mil_proj_[e], nullptr);
      pooled = first ? g : ops::add(tape, pooled, g);
      first = false;
    }
  } else {
    pooled = ops::mean_rows(tape, tr.stage_nodes.back(), 0, tr.stage_coords.back()->size());
  }
  return ops::linear(tape, pooled, *cls_weight_, cls_bias_);
}

template <class T>
NodeId SpanModel<T>::unet_logits(Tape<T>& tape, const Trace& tr) {
  if (config_.head != HeadKind::unet) throw Error(ErrorCode::ConfigError, "model was built with a MIL head");
  const std::size_t num_stages = stages_.size();
  if (tr.rulebooks.size() != num_stages || tr.stage_nodes.size() != num_stages)
    throw Error(ErrorCode::RulebookMissing, "decoder needs one retained rulebook per encoder stage");
  NodeId x = tr.stage_nodes.back();
  for (std::size_t j = 0; j < num_stages; ++j) {
    const std::size_t e = num_stages - 1 - j;
    for (const CarParams<T>& car : decoder_[j].car) x = ops::car_block(tape, x, tr.stage_coords[e], tr.num_ctx, car);
    const ConvRulebook& fwd = *tr.rulebooks[e];
    const auto& target = e == 0 ? *tr.input_coords : *tr.stage_coords[e - 1];
    auto rbt = std::make_shared<const ConvRulebook>(transpose_rulebook(fwd, target));
    x = ops::sac(tape, x, tr.num_ctx, rbt, *decoder_[j].sac_weight, *decoder_[j].sac_bias);
    if (e == 0) break;
    const NodeId skip = tr.stage_nodes[e - 1];
    switch (config_.skip) {
      case SkipMode::concat: x = ops::concat_cols(tape, x, skip); break;
      case SkipMode::add: x = ops::add(tape, x, skip); break;
      case SkipMode::none: break;
    }
  }
  const NodeId patches = ops::slice_rows(tape, x, 0, tr.input_coords->size());
  return ops::linear(tape, patches, *seg_weight_, seg_bias_);
}

template <class T>
NodeId SpanModel<T>::mil_loss(Tape<T>& tape, const SparseMap<T>& input, int label) {
  const Trace tr = encode(tape, input);
  const NodeId logits = mil_logits(tape, tr);
  const int labels[1] = {label};
  return ops::softmax_cross_entropy(tape, logits, labels);
}

template <class T>
NodeId SpanModel<T>::unet_loss(Tape<T>& tape, const SparseMap<T>& input, std::span<const std::uint8_t> mask) {
  const Trace tr = encode(tape, input);
  const NodeId logits = unet_logits(tape, tr);
  if (config_.loss.kind == LossKind::hybrid) return ops::hybrid_segmentation_loss(tape, logits, mask, config_.loss);
  std::vector<int> labels(mask.begin(), mask.end());
  return ops::softmax_cross_entropy(tape, logits, labels);
}

namespace {

template <class T>
std::vector<T> softmax_row(std::span<const T> z) {
  std::vector<T> p(z.begin(), z.end());
  const T mx = *std::max_element(p.begin(), p.end());
  T sum = 0;
  for (T& v : p) sum += (v = std::exp(v - mx));
  for (T& v : p) v /= sum;
  return p;
}

}  // namespace

template <class T>
std::vector<T> SpanModel<T>::predict_proba(const SparseMap<T>& input) {
  Tape<T> tape;
  const Trace tr = encode(tape, input);
  return softmax_row<T>(tape.value(mil_logits(tape, tr)).row(0));
}

template <class T>
SegmentationOutput<T> SpanModel<T>::predict_segmentation(const SparseMap<T>& input) {
  Tape<T> tape;
  const Trace tr = encode(tape, input);
  return {input.coords, tape.value(unet_logits(tape, tr))};
}

template <class T>
EncoderOutput<T> encoder_forward(const SparseMap<T>& map, SpanModel<T>& model) {
  Tape<T> tape;
  const auto tr = model.encode(tape, map);
  EncoderOutput<T> out;
  out.input_coords = map.coords;
  for (std::size_t e = 0; e < tr.stage_nodes.size(); ++e) {
    const Matrix<T>& rows = tape.value(tr.stage_nodes[e]);
    const std::size_t n = tr.stage_coords[e]->size();
    SparseMap<T> m;
    m.coords = *tr.stage_coords[e];
    m.features = Matrix<T>(n, rows.cols());
    m.context = Matrix<T>(tr.num_ctx, rows.cols());
    std::copy_n(rows.data(), m.features.size(), m.features.data());
    std::copy_n(rows.data() + m.features.size(), m.context.size(), m.context.data());
    out.stage_globals.push_back(m.context);
    out.stage_maps.push_back(std::move(m));
    out.stage_rulebooks.push_back(*tr.rulebooks[e]);
  }
  return out;
}

template <class T>
std::vector<T> mil_head(const EncoderOutput<T>& enc, SpanModel<T>& model) {
  if (enc.stage_globals.empty() || enc.stage_globals.front().rows() == 0)
    throw Error(ErrorCode::MissingContext, "MIL head needs per-stage context tokens");
  Tape<T> tape;
  const auto tr = model.import_encoder(tape, enc);
  return softmax_row<T>(tape.value(model.mil_logits(tape, tr)).row(0));
}

template <class T>
SegmentationOutput<T> unet_decode(const EncoderOutput<T>& enc, SpanModel<T>& model) {
  if (enc.stage_rulebooks.size() != enc.stage_maps.size() || enc.stage_maps.empty())
    throw Error(ErrorCode::RulebookMissing, "encoder output lacks retained rulebooks");
  Tape<T> tape;
  const auto tr = model.import_encoder(tape, enc);
  return {enc.input_coords, tape.value(model.unet_logits(tape, tr))};
}

template class SpanModel<float>;
template class SpanModel<double>;
template EncoderOutput<float> encoder_forward(const SparseMap<float>&, SpanModel<float>&);
template EncoderOutput<double> encoder_forward(const SparseMap<double>&, SpanModel<double>&);
template std::vector<float> mil_head(const EncoderOutput<float>&, SpanModel<float>&);
template std::vector<double> mil_head(const EncoderOutput<double>&, SpanModel<double>&);
template SegmentationOutput<float> unet_decode(const EncoderOutput<float>&, SpanModel<float>&);
template SegmentationOutput<double> unet_decode(const EncoderOutput<double>&, SpanModel<double>&);

}  // namespace span
