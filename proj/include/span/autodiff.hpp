#pragma once

// Reverse-mode scaffolding: every op records its output value on a Tape together
// with a hand-written backward closure; Tape::backward replays the closures in
// reverse recording order. Parameters live in a ParamStore and receive their
// gradients by accumulation, so repeated backward calls add up until zero_grad().

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "span/matrix.hpp"

namespace span {

template <class T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  Matrix<T> m;  // first moment
  Matrix<T> v;  // second moment
  bool frozen = false;
};

template <class T>
class ParamStore {
 public:
  // Throws InvalidArgument on a duplicate name.
  Param<T>& add(const std::string& name, std::size_t rows, std::size_t cols);
  Param<T>& get(const std::string& name);
  const Param<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Param<T>>& params() noexcept { return params_; }
  const std::deque<Param<T>>& params() const noexcept { return params_; }

  void zero_grad();
  std::size_t num_scalars() const;

  template <class U>
  void copy_values_from(const ParamStore<U>& other);

 private:
  std::deque<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using NodeId = std::size_t;

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  NodeId constant(Matrix<T> value);
  NodeId record(Matrix<T> value, BackwardFn backward);

  const Matrix<T>& value(NodeId id) const { return nodes_.at(id).value; }
  // Gradient buffer of a node, zero-allocated on first access.
  Matrix<T>& grad(NodeId id);
  bool has_grad(NodeId id) const { return nodes_.at(id).grad_live; }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(loss) = seed on a 1x1 node and replays every recorded op in reverse.
  // Throws EmptyTape when nothing was recorded.
  void backward(NodeId loss, T seed = T(1));

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool grad_live = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Builds a scalar loss on a fresh tape from the store's current values.
template <class T>
using LossFn = std::function<NodeId(Tape<T>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

enum class FiniteDifference {
  central,  // (f(t+e) - f(t-e)) / 2e
  ridders,  // adaptive Richardson tableau over central differences from step eps, restarted at eps/10 and eps/100 if unsettled
};

// Finite differences on up to samples_per_param randomly chosen entries of
// every non-frozen parameter; error is |a - n| / (|a| + |n| + 1e-8).
template <class T>
GradCheckReport grad_check(const LossFn<T>& loss_fn, ParamStore<T>& store, double eps = 1e-4,
                           std::size_t samples_per_param = 200, std::uint64_t seed = 0,
                           FiniteDifference scheme = FiniteDifference::central);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected adaptive-moment update at timestep t (t >= 1).
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg, std::int64_t t);

template <class T>
template <class U>
void ParamStore<T>::copy_values_from(const ParamStore<U>& other) {
  for (auto& p : params_) {
    const auto& src = other.get(p.name);
    p.value = src.value.template cast<T>();
  }
}

}  // namespace span
