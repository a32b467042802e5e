#pragma once

#include <deque>
#include <functional>
#include <initializer_list>

#include "muonseg/tensor.hpp"

namespace muonseg {

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Records operations in execution order. backward() walks the nodes in exact
// reverse order; each node's backward closure adds into its parents' gradient
// buffers, so fan-out accumulates additively.
template <typename T>
class Tape {
 public:
  // Receives the tape and the gradient of the node's output.
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf bound to a parameter; backward() adds its gradient into p.grad.
  // The parameter must outlive the tape.
  Var<T> parameter(Parameter<T>& p) {
    Node& n = nodes_.emplace_back();
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = recording_;
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // Adds the result of an operation. The closure is kept only when some
  // parent needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    bool needs = false;
    if (recording_) {
      for (const Var<T>& p : parents) needs = needs || nodes_[p.id].requires_grad;
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  // Zero-initialised on first use.
  Tensor<T>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape(), T(0));
    return n.grad;
  }
  const Tensor<T>* grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 for a single-element loss.
  void backward(Var<T> loss) {
    if (!recording_) throw ValidationError("backward() on a tape that does not record gradients");
    if (value(loss.id).size() != 1) throw ValidationError("backward() needs a scalar loss");
    grad_buffer(loss.id)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        auto& g = n.param->grad;
        if (g.shape() != n.grad.shape()) g = Tensor<T>(n.grad.shape(), T(0));
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool recording_;
  std::deque<Node> nodes_;
};

}  // namespace muonseg
