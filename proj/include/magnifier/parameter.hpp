#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "magnifier/tensor.hpp"

namespace magnifier {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  // Optimizer state; first and second moment buffers share the value's shape.
  Tensor<T> moment1;
  Tensor<T> moment2;
  std::uint64_t step = 0;
  bool grad_ready = false;
};

// Named trainable tensors. Iteration order is the lexicographic name order,
// which fixes the order of checkpoint records and optimizer updates.
template <typename T>
class ParameterSet {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  Parameter<T>& add(const std::string& name, Tensor<T> init);
  Parameter<T>& at(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_scalars() const noexcept;

  // True once a backward pass has written gradients that no step consumed yet.
  bool grads_ready() const noexcept;
  void zero_grad();

  typename Map::iterator begin() { return params_.begin(); }
  typename Map::iterator end() { return params_.end(); }
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;

}  // namespace magnifier
