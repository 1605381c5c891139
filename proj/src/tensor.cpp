#include "magnifier/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "magnifier/errors.hpp"

namespace magnifier {

std::size_t shape_size(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a == b) return;
  std::ostringstream os;
  os << what << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  if (a.size() == b.size()) {
    os << " (axes";
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) os << ' ' << i;
    os << ')';
  }
  throw DimensionError(os.str());
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(s));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("Tensor: zero-length axis in " + shape_str(shape_));
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("Tensor: zero-length axis in " + shape_str(shape_));
  if (data_.size() != shape_size(shape_))
    throw DimensionError("Tensor: data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw IndexError("Tensor::dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape_));
  return shape_[axis];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size())
    throw IndexError("Tensor::at: index rank does not match " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw IndexError("Tensor::at: index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1)
    throw DimensionError("Tensor::item on non-scalar " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw DimensionError("Tensor::reshaped: " + shape_str(shape_) + " -> " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace magnifier
