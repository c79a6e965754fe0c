#include "span/losses.hpp"

#include <algorithm>
#include <cmath>

#include "span/error.hpp"

namespace span {

namespace {

double clamp_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::DomainError, "probability outside [0,1]: " + std::to_string(p));
  return std::max(p, kProbClamp);
}

void check_mask(std::span<const double> p, std::span<const std::uint8_t> mask) {
  if (p.size() != mask.size()) throw Error(ErrorCode::DimensionMismatch, "probabilities vs mask length");
  if (p.empty()) throw Error(ErrorCode::EmptyMap, "loss over zero patches");
  for (std::uint8_t y : mask)
    if (y > 1) throw Error(ErrorCode::DomainError, "mask must be binary");
}

double sigmoid(double z) noexcept { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_survival(std::size_t rows, int k_bins, std::span<const int> labels, std::span<const int> censor) {
  if (labels.size() != rows || censor.size() != rows)
    throw Error(ErrorCode::DimensionMismatch, "labels / censor length vs logits rows");
  if (rows == 0) throw Error(ErrorCode::EmptyMap, "survival loss over zero samples");
  for (std::size_t i = 0; i < rows; ++i) {
    if (censor[i] != 0 && censor[i] != 1) throw Error(ErrorCode::DomainError, "censor flag must be 0 or 1");
    if (labels[i] < 0 || labels[i] >= k_bins) throw Error(ErrorCode::IndexError, "label outside [0, K)");
    if (censor[i] == 1 && labels[i] + 1 > k_bins) throw Error(ErrorCode::IndexError, "S_{y+1} out of range");
  }
}

// Value of one sample's survival NLL term and optional d/dlogit.
double survival_term(const double* z, int y, int c, double* grad) {
  // log h_k and log(1 - h_k), clamped at kProbClamp.
  auto log_h = [&](int k, double& d) {
    const double h = sigmoid(z[k]);
    if (h < kProbClamp) {
      d = 0.0;
      return std::log(kProbClamp);
    }
    d = 1.0 - h;
    return std::log(h);
  };
  auto log_1mh = [&](int k, double& d) {
    const double h = sigmoid(z[k]);
    if (1.0 - h < kProbClamp) {
      d = 0.0;
      return std::log(kProbClamp);
    }
    d = -h;
    return std::log1p(-h);
  };
  double ll = 0.0;
  double d = 0.0;
  const int s_upto = c == 0 ? y : y + 1;  // log S_m sums log(1 - h_j), j < m
  for (int j = 0; j < s_upto; ++j) {
    ll += log_1mh(j, d);
    if (grad) grad[j] -= d;
  }
  if (c == 0) {
    ll += log_h(y, d);
    if (grad) grad[y] -= d;
  }
  return -ll;
}

}  // namespace

double ce_loss(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) throw Error(ErrorCode::IndexError, "label outside class range");
  for (double p : probs) clamp_prob(p);
  return -std::log(clamp_prob(probs[label]));
}

double binary_ce_loss(std::span<const double> p, std::span<const std::uint8_t> mask) {
  check_mask(p, mask);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = clamp_prob(p[i]);
    const double qi = clamp_prob(1.0 - std::min(p[i], 1.0));
    sum -= mask[i] ? std::log(pi) : std::log(qi);
  }
  return sum / static_cast<double>(p.size());
}

double dice_loss(std::span<const double> p, std::span<const std::uint8_t> mask, double eps) {
  check_mask(p, mask);
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    clamp_prob(p[i]);
    inter += p[i] * mask[i];
    sp += p[i];
    sy += mask[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
}

double hybrid_loss(std::span<const double> p, std::span<const std::uint8_t> mask, const LossSpec& spec) {
  if (spec.lambda < 0.0 || spec.lambda > 1.0) throw Error(ErrorCode::DomainError, "lambda outside [0,1]");
  const double ce = binary_ce_loss(p, mask);
  const bool any = std::any_of(mask.begin(), mask.end(), [](std::uint8_t y) { return y != 0; });
  if (!any) return ce;
  return (1.0 - spec.lambda) * ce + spec.lambda * dice_loss(p, mask, spec.dice_eps);
}

double survival_nll_loss(const Matrix<double>& z, std::span<const int> labels, std::span<const int> censor) {
  const int k_bins = static_cast<int>(z.cols());
  check_survival(z.rows(), k_bins, labels, censor);
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) total += survival_term(z.row(i).data(), labels[i], censor[i], nullptr);
  return total / static_cast<double>(z.rows());
}

std::vector<int> discretize_survival(std::span<const double> times, std::span<const int> events, int k_bins) {
  if (times.size() != events.size()) throw Error(ErrorCode::DimensionMismatch, "times vs events length");
  if (k_bins < 1) throw Error(ErrorCode::InvalidArgument, "need at least one bin");
  std::vector<double> uncensored;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] > 0.0)) throw Error(ErrorCode::DomainError, "survival times must be positive");
    if (events[i] == 1) uncensored.push_back(times[i]);
  }
  if (uncensored.size() < static_cast<std::size_t>(k_bins))
    throw Error(ErrorCode::DegenerateQuantiles, "fewer uncensored samples than bins");
  std::sort(uncensored.begin(), uncensored.end());

  // Linear-interpolated quantiles at k / K, k = 1..K-1, bracketed by min and max.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(uncensored.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, uncensored.size() - 1);
    return uncensored[lo] + (pos - static_cast<double>(lo)) * (uncensored[hi] - uncensored[lo]);
  };
  std::vector<double> edges;
  edges.push_back(uncensored.front());
  for (int k = 1; k < k_bins; ++k) edges.push_back(quantile(static_cast<double>(k) / k_bins));
  edges.push_back(uncensored.back());
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw Error(ErrorCode::DegenerateQuantiles, "bin edges are not increasing");

  std::vector<int> labels(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    int bin = 0;
    for (int k = 1; k < k_bins; ++k)
      if (times[i] > edges[static_cast<std::size_t>(k)]) bin = k;
    labels[i] = bin;
  }
  return labels;
}

namespace ops {

template <class T>
NodeId softmax_cross_entropy(Tape<T>& tape, NodeId logits, std::span<const int> labels) {
  const Matrix<T>& z = tape.value(logits);
  if (labels.size() != z.rows()) throw Error(ErrorCode::DimensionMismatch, "labels vs logit rows");
  if (z.rows() == 0) throw Error(ErrorCode::EmptyMap, "cross entropy over zero rows");
  Matrix<T> probs(z.rows(), z.cols());
  double loss = 0.0;
  for (std::size_t n = 0; n < z.rows(); ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= z.cols())
      throw Error(ErrorCode::IndexError, "label outside class range");
    T mx = *std::max_element(z.row(n).begin(), z.row(n).end());
    T sum = 0;
    for (std::size_t c = 0; c < z.cols(); ++c) sum += (probs(n, c) = std::exp(z(n, c) - mx));
    for (std::size_t c = 0; c < z.cols(); ++c) probs(n, c) /= sum;
    loss -= static_cast<double>(z(n, static_cast<std::size_t>(labels[n])) - mx - std::log(sum));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const auto rows = static_cast<T>(z.rows());
  return tape.record(Matrix<T>(1, 1, static_cast<T>(loss / z.rows())),
                     [logits, probs = std::move(probs), lab = std::move(lab), rows, self = tape.size()](Tape<T>& t) {
                       const T g = t.grad(self)(0, 0) / rows;
                       auto& gz = t.grad(logits);
                       for (std::size_t n = 0; n < probs.rows(); ++n)
                         for (std::size_t c = 0; c < probs.cols(); ++c)
                           gz(n, c) += g * (probs(n, c) - (static_cast<int>(c) == lab[n] ? T(1) : T(0)));
                     });
}

template <class T>
NodeId hybrid_segmentation_loss(Tape<T>& tape, NodeId logits, std::span<const std::uint8_t> mask,
                                const LossSpec& spec) {
  const Matrix<T>& z = tape.value(logits);
  if (z.cols() != 2) throw Error(ErrorCode::DimensionMismatch, "hybrid loss expects two classes");
  if (mask.size() != z.rows()) throw Error(ErrorCode::DimensionMismatch, "mask vs logit rows");
  if (spec.lambda < 0.0 || spec.lambda > 1.0) throw Error(ErrorCode::DomainError, "lambda outside [0,1]");
  const std::size_t n = z.rows();
  std::vector<double> p(n);
  double ce = 0.0, inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = static_cast<double>(z(i, 1)) - static_cast<double>(z(i, 0));
    p[i] = sigmoid(diff);
    // -log softmax_y = softplus(-diff) for y = 1, softplus(diff) for y = 0
    const double a = mask[i] ? -diff : diff;
    ce += a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
    inter += p[i] * mask[i];
    sp += p[i];
    sy += mask[i];
  }
  ce /= static_cast<double>(n);
  const bool any = sy > 0;
  const double lam = any ? spec.lambda : 0.0;
  const double denom = sp + sy + spec.dice_eps;
  const double numer = 2.0 * inter + spec.dice_eps;
  const double dice = 1.0 - numer / denom;
  const double loss = (1.0 - lam) * ce + lam * dice;

  std::vector<std::uint8_t> y(mask.begin(), mask.end());
  return tape.record(Matrix<T>(1, 1, static_cast<T>(loss)),
                     [logits, p = std::move(p), y = std::move(y), lam, numer, denom, self = tape.size()](Tape<T>& t) {
                       const double g = static_cast<double>(t.grad(self)(0, 0));
                       auto& gz = t.grad(logits);
                       const double n = static_cast<double>(p.size());
                       for (std::size_t i = 0; i < p.size(); ++i) {
                         // d/d(diff) of each part; diff = z1 - z0
                         const double dce = (p[i] - y[i]) / n;
                         const double ddice_dp = -(2.0 * y[i] * denom - numer) / (denom * denom);
                         const double dd = (1.0 - lam) * dce + lam * ddice_dp * p[i] * (1.0 - p[i]);
                         gz(i, 1) += static_cast<T>(g * dd);
                         gz(i, 0) -= static_cast<T>(g * dd);
                       }
                     });
}

template <class T>
NodeId survival_nll(Tape<T>& tape, NodeId hazard_logits, std::span<const int> labels, std::span<const int> censor) {
  const Matrix<T>& zt = tape.value(hazard_logits);
  const int k_bins = static_cast<int>(zt.cols());
  check_survival(zt.rows(), k_bins, labels, censor);
  const Matrix<double> z = zt.template cast<double>();
  Matrix<double> grad(z.rows(), z.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i)
    total += survival_term(z.row(i).data(), labels[i], censor[i], grad.row(i).data());
  const double inv = 1.0 / static_cast<double>(z.rows());
  for (double& g : grad.storage()) g *= inv;
  return tape.record(Matrix<T>(1, 1, static_cast<T>(total * inv)),
                     [hazard_logits, grad = std::move(grad), self = tape.size()](Tape<T>& t) {
                       const double g = static_cast<double>(t.grad(self)(0, 0));
                       auto& gz = t.grad(hazard_logits);
                       for (std::size_t i = 0; i < grad.size(); ++i) gz.data()[i] += static_cast<T>(g * grad.data()[i]);
                     });
}

template NodeId softmax_cross_entropy(Tape<float>&, NodeId, std::span<const int>);
template NodeId softmax_cross_entropy(Tape<double>&, NodeId, std::span<const int>);
template NodeId hybrid_segmentation_loss(Tape<float>&, NodeId, std::span<const std::uint8_t>, const LossSpec&);
template NodeId hybrid_segmentation_loss(Tape<double>&, NodeId, std::span<const std::uint8_t>, const LossSpec&);
template NodeId survival_nll(Tape<float>&, NodeId, std::span<const int>, std::span<const int>);
template NodeId survival_nll(Tape<double>&, NodeId, std::span<const int>, std::span<const int>);

}  // namespace ops

}  // namespace span
