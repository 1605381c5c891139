#include "magnifier/maskhead.hpp"

#include <cmath>

namespace magnifier::maskhead {

template <typename T>
Var<T> predict_masks(Var<T> features, const MaskHeadVars<T>& head) {
  auto x = relu(conv2d(features, head.conv1_w, head.conv1_b, 1, 1));
  x = relu(conv2d(x, head.conv2_w, head.conv2_b, 1, 1));
  return conv2d(x, head.out_w, head.out_b, 1, 0);
}

template <typename T>
Var<T> mask_loss(Var<T> logits, const Tensor<T>& pseudo) {
  return bce_with_logits(logits, pseudo);
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& logits, double threshold) {
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits[i]);
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    out[i] = p >= threshold ? T{1} : T{0};
  }
  return out;
}

template Var<float> predict_masks(Var<float>, const MaskHeadVars<float>&);
template Var<double> predict_masks(Var<double>, const MaskHeadVars<double>&);
template Var<float> mask_loss(Var<float>, const Tensor<float>&);
template Var<double> mask_loss(Var<double>, const Tensor<double>&);
template Tensor<float> binarize(const Tensor<float>&, double);
template Tensor<double> binarize(const Tensor<double>&, double);

}  // namespace magnifier::maskhead
