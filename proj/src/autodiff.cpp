#include "span/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "span/error.hpp"

namespace span {

template <class T>
Param<T>& ParamStore<T>::add(const std::string& name, std::size_t rows, std::size_t cols) {
  if (index_.count(name) != 0) throw Error(ErrorCode::InvalidArgument, "duplicate parameter " + name);
  index_.emplace(name, params_.size());
  Param<T>& p = params_.emplace_back();
  p.name = name;
  p.value = Matrix<T>(rows, cols);
  p.grad = Matrix<T>(rows, cols);
  p.m = Matrix<T>(rows, cols);
  p.v = Matrix<T>(rows, cols);
  return p;
}

template <class T>
Param<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::InvalidArgument, "unknown parameter " + name);
  return params_[it->second];
}

template <class T>
const Param<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::InvalidArgument, "unknown parameter " + name);
  return params_[it->second];
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T(0));
}

template <class T>
std::size_t ParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <class T>
NodeId Tape<T>::constant(Matrix<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return nodes_.size() - 1;
}

template <class T>
NodeId Tape<T>::record(Matrix<T> value, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), {}, false, std::move(backward)});
  return nodes_.size() - 1;
}

template <class T>
Matrix<T>& Tape<T>::grad(NodeId id) {
  Node& n = nodes_.at(id);
  if (!n.grad_live) {
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
      n.grad = Matrix<T>(n.value.rows(), n.value.cols());
    else
      n.grad.fill(T(0));
    n.grad_live = true;
  }
  return n.grad;
}

template <class T>
void Tape<T>::backward(NodeId loss, T seed) {
  if (nodes_.empty()) throw Error(ErrorCode::EmptyTape, "no operations recorded");
  if (loss >= nodes_.size()) throw Error(ErrorCode::InvalidArgument, "loss node out of range");
  if (nodes_[loss].value.size() != 1) throw Error(ErrorCode::DimensionMismatch, "loss must be a 1x1 node");
  for (auto& n : nodes_) n.grad_live = false;
  grad(loss)(0, 0) = seed;
  for (std::size_t i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad_live) n.backward(*this);
  }
}

namespace {

struct Extrapolated {
  double value;
  double error;
};

// Ridders' extrapolation: Neville tableau over central differences at steps
// h, h/c, h/c^2, ...; returns the entry with the smallest error estimate.
template <class F>
Extrapolated ridders(F&& central, double h) {
  constexpr int kTab = 10;
  constexpr double kCon = 1.4, kCon2 = kCon * kCon, kSafe = 2.0;
  double a[kTab][kTab];
  a[0][0] = central(h);
  Extrapolated best{a[0][0], std::numeric_limits<double>::max()};
  for (int i = 1; i < kTab; ++i) {
    h /= kCon;
    a[0][i] = central(h);
    double fac = kCon2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kCon2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= best.error) best = {a[j][i], e};
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * best.error) break;
  }
  return best;
}

// Restarts from 10x and 100x smaller steps when the tableau does not settle,
// which happens when the first step already leaves the locally quadratic region.
template <class F>
double ridders_restarted(F&& central, double h) {
  Extrapolated best = ridders(central, h);
  for (int restart = 0; restart < 2; ++restart) {
    if (best.error <= 1e-7 * std::abs(best.value) + 1e-13) break;
    h /= 10.0;
    const Extrapolated r = ridders(central, h);
    if (r.error < best.error) best = r;
  }
  return best.value;
}

}  // namespace

template <class T>
GradCheckReport grad_check(const LossFn<T>& loss_fn, ParamStore<T>& store, double eps,
                           std::size_t samples_per_param, std::uint64_t seed, FiniteDifference scheme) {
  auto eval = [&]() {
    Tape<T> tape;
    const NodeId loss = loss_fn(tape);
    return static_cast<double>(tape.value(loss)(0, 0));
  };

  store.zero_grad();
  {
    Tape<T> tape;
    const NodeId loss = loss_fn(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (auto& p : store.params()) {
    if (p.frozen) continue;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n > samples_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples_per_param);
      std::sort(idx.begin(), idx.end());
    }
    const Matrix<T> analytic = p.grad;
    for (std::size_t i : idx) {
      T& theta = p.value.storage()[i];
      const T saved = theta;
      auto central = [&](double h) {
        theta = saved + static_cast<T>(h);
        const double fp = eval();
        theta = saved - static_cast<T>(h);
        const double fm = eval();
        theta = saved;
        return (fp - fm) / (2.0 * h);
      };
      const double numeric = scheme == FiniteDifference::central ? central(eps) : ridders_restarted(central, eps);
      const double a = static_cast<double>(analytic.storage()[i]);
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      ++report.coords_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg, std::int64_t t) {
  if (t < 1) throw Error(ErrorCode::InvalidArgument, "adam timestep must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (auto& p : store.params()) {
    if (p.frozen) continue;
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* m = p.m.data();
    T* v = p.v.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mh = static_cast<double>(m[i]) / bc1;
      const double vh = static_cast<double>(v[i]) / bc2;
      w[i] -= static_cast<T>(cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;
template GradCheckReport grad_check(const LossFn<float>&, ParamStore<float>&, double, std::size_t, std::uint64_t,
                                    FiniteDifference);
template GradCheckReport grad_check(const LossFn<double>&, ParamStore<double>&, double, std::size_t, std::uint64_t,
                                    FiniteDifference);
template void adam_step(ParamStore<float>&, const AdamConfig&, std::int64_t);
template void adam_step(ParamStore<double>&, const AdamConfig&, std::int64_t);

}  // namespace span
