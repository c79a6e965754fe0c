#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "span/autodiff.hpp"
#include "span/matrix.hpp"

namespace span {

inline constexpr double kProbClamp = 1e-12;

enum class LossKind { ce, hybrid, survival };

struct LossSpec {
  LossKind kind = LossKind::ce;
  double lambda = 0.75;  // Dice weight
  double dice_eps = 1.0;
  int k_bins = 3;
};

// -log p[label]; p is a probability vector.
double ce_loss(std::span<const double> probs, std::size_t label);

// Pixel-wise binary cross entropy over foreground probabilities, mean over patches.
double binary_ce_loss(std::span<const double> fg_probs, std::span<const std::uint8_t> mask);

// 1 - (2 sum(p y) + eps) / (sum p + sum y + eps) on foreground probabilities.
double dice_loss(std::span<const double> fg_probs, std::span<const std::uint8_t> mask, double eps);

// (1 - lambda) CE + lambda Dice when the mask has any foreground, CE alone otherwise.
double hybrid_loss(std::span<const double> fg_probs, std::span<const std::uint8_t> mask, const LossSpec& spec);

// Discrete-time hazard NLL. Row i of hazard_logits holds K logits; h = sigmoid(logit),
// S_0 = 1, S_k = prod_{j<k} (1 - h_j). censor[i] = 1 marks a censored sample.
double survival_nll_loss(const Matrix<double>& hazard_logits, std::span<const int> labels,
                         std::span<const int> censor);

// Quantile bins of the uncensored times (event = 1), applied to every sample.
std::vector<int> discretize_survival(std::span<const double> times, std::span<const int> events, int k_bins);

namespace ops {

// Mean softmax cross entropy of an n x c logit node against n labels.
template <class T>
NodeId softmax_cross_entropy(Tape<T>& tape, NodeId logits, std::span<const int> labels);

// Hybrid CE + Dice on an n x 2 logit node (column 1 = foreground).
template <class T>
NodeId hybrid_segmentation_loss(Tape<T>& tape, NodeId logits, std::span<const std::uint8_t> mask,
                                const LossSpec& spec);

template <class T>
NodeId survival_nll(Tape<T>& tape, NodeId hazard_logits, std::span<const int> labels, std::span<const int> censor);

}  // namespace ops

}  // namespace span
