#include "magnifier/tape.hpp"

#include "magnifier/errors.hpp"

namespace magnifier {

template <typename T>
Parameter<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> init) {
  if (params_.count(name)) throw ConfigError("ParameterSet: duplicate parameter '" + name + "'");
  Parameter<T> p;
  p.grad = Tensor<T>(init.shape());
  p.moment1 = Tensor<T>(init.shape());
  p.moment2 = Tensor<T>(init.shape());
  p.value = std::move(init);
  return params_.emplace(name, std::move(p)).first->second;
}

template <typename T>
Parameter<T>& ParameterSet<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw IndexError("ParameterSet: no parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Parameter<T>& ParameterSet<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw IndexError("ParameterSet: no parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParameterSet<T>::num_scalars() const noexcept {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

template <typename T>
bool ParameterSet<T>::grads_ready() const noexcept {
  for (const auto& [name, p] : params_)
    if (p.grad_ready) return true;
  return false;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& [name, p] : params_) {
    p.grad.fill(T{0});
    p.grad_ready = false;
  }
}

template <typename T>
Var<T> Tape<T>::push(Node node) {
  if (backward_done_) throw ContractError("Tape: cannot record after backward()");
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape != this) throw ContractError("Tape: input recorded on a different tape");
    if (nodes_.at(in.id).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
const Tensor<T>* Tape<T>::grad_of(std::size_t id) const {
  const auto& n = nodes_.at(id);
  return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  if (v.tape != this) throw ContractError("Tape::grad: variable belongs to a different tape");
  const auto& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  return Tensor<T>(n.value.shape());
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.tape != this) throw ContractError("Tape::backward: root belongs to a different tape");
  if (backward_done_)
    throw ContractError("Tape::backward: already called on this tape; record a new tape");
  const auto& r = nodes_.at(root.id);
  if (r.value.size() != 1)
    throw ContractError("Tape::backward: root must be scalar, got shape " +
                        shape_str(r.value.shape()));
  backward_done_ = true;
  grad_buffer(root.id)[0] = T{1};
  for (std::size_t i = root.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (!n.param) continue;
    auto& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    if (n.has_grad) {
      auto dst = p.grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    p.grad_ready = true;
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace magnifier
