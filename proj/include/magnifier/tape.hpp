#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "magnifier/parameter.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

// Wengert list for reverse-mode differentiation. Nodes are appended in
// creation order; backward() walks them once in reverse, and gradients of a
// node with several consumers accumulate additively.
template <typename T>
class Tape {
 public:
  // Called with the tape and the node's own id; reads grad_of(id) and
  // accumulates into the gradient buffers of the node's inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);
  // Binds a trainable parameter. The parameter must outlive the tape.
  Var<T> parameter(Parameter<T>& p);

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  // Gradient accumulated at a node during backward; nullptr if nothing reached it.
  const Tensor<T>* grad_of(std::size_t id) const;
  // Gradient buffer of an input, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t id);

  // dRoot/dv after backward(); zeros when v does not influence the root.
  Tensor<T> grad(Var<T> v) const;

  void backward(Var<T> root);
  bool backward_done() const noexcept { return backward_done_; }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Non-smooth ops report how far the current point is from their nearest
  // switching surface (ReLU zero crossing, max-pool runner-up, ...). Gradient
  // checks use the minimum to reject instances that straddle a kink.
  void note_kink(double margin) noexcept {
    if (margin < kink_margin_) kink_margin_ = margin;
  }
  double kink_margin() const noexcept { return kink_margin_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace magnifier
