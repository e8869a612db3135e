#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi {

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool needs_grad() const { return tape_->needs_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so the node list
/// is topologically sorted by construction; backward walks it once in reverse.
///
/// Nodes whose inputs carry no gradient are recorded without a backward
/// closure, which makes a forward pass through frozen components cheap.
template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives gradient.
  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Free leaf owned by the tape whose gradient is readable via grad().
  Var<T> variable(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    return push(std::move(n));
  }

  /// Leaf bound to a model parameter. The tensor is referenced, not copied, and
  /// must outlive the tape. Gradient flows into the parameter only when its
  /// requires_grad flag is set.
  Var<T> parameter(Tensor<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var<T>(this, it->second);
    Node n;
    n.external = &p;
    n.param = &p;
    n.needs_grad = p.requires_grad();
    Var<T> v = push(std::move(n));
    bound_.emplace(&p, v.id());
    return v;
  }

  /// Read-only leaf bound to an external tensor.
  Var<T> constant_ref(const Tensor<T>& p) {
    Node n;
    n.external = &p;
    return push(std::move(n));
  }

  /// Records the result of an operation. The backward closure is kept only if
  /// some input requires gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool any = false;
    for (const auto& in : inputs) any = any || needs_grad(in.id());
    return record_if(std::move(value), any, std::move(backward));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
    bool any = false;
    for (const auto& in : inputs) any = any || needs_grad(in.id());
    return record_if(std::move(value), any, std::move(backward));
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulated for a node during backward (empty if none reached it).
  std::span<const T> grad(const Var<T>& v) const { return nodes_[v.id()].grad; }

  /// Mutable gradient buffer for a node, zero-initialized on first access.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }

  std::span<const T> upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Runs reverse-mode accumulation from a scalar output.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar output, got " + shape_string(loss.value().shape()));
    }
    if (!needs_grad(loss.id())) return;
    grad_buffer(loss.id())[0] += T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->accumulate_grad(n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record_if(Tensor<T> value, bool needs, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> bound_;
};

}  // namespace pengi
