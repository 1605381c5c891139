#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "magnifier/tape.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier {

enum class BnMode { kTrain, kEval };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

// Elementwise, operands of identical shape.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> one_minus(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);

// Reductions to a rank-0 scalar.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

// Sum of rank-0 scalars with fixed coefficients.
template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> scalars, std::span<const T> weights);

// x[B,I] * w[O,I]^T (+ b[O]).
template <typename T> Var<T> linear(Var<T> x, Var<T> w);
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

// Concatenation of rank-2 tensors along axis 1.
template <typename T> Var<T> concat(std::span<const Var<T>> parts);

// Cross-correlation through im2col + matmul.
// input [N,C,H,W], weight [Co,C,kh,kw], bias [Co] -> [N,Co,H',W'].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride,
              std::size_t padding);

// Normalizes over every axis except axis 1 (rank 2 [N,C] or rank 4 [N,C,H,W]).
// Train mode uses the biased batch variance and folds the unbiased variance
// into the running estimate with the given momentum.
template <typename T>
Var<T> batchnorm(Var<T> input, Var<T> scale, Var<T> shift, BatchNormStats<T>& stats,
                 BnMode mode, T momentum, T eps);

// [N,C,H,W] -> [N,C]. The gradient goes to the first maximum in row-major order.
template <typename T> Var<T> global_max_pool(Var<T> input);

// Mean over the batch of -log softmax(logits)[target]. logits [B,C].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::size_t> targets);

// Mean binary cross-entropy between sigmoid(logits) and targets in [0,1].
template <typename T> Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets);

template <typename T>
struct GruWeights {
  Var<T> w_z, u_z, b_z;  // update gate
  Var<T> w_r, u_r, b_r;  // reset gate
  Var<T> w_h, u_h, b_h;  // candidate state
};

// One step of a GRU cell. x [B,I], h_prev [B,Hd]; W_* [Hd,I], U_* [Hd,Hd], b_* [Hd].
//   z = sigmoid(W_z x + U_z h + b_z)
//   r = sigmoid(W_r x + U_r h + b_r)
//   c = tanh(W_h x + U_h (r * h) + b_h)
//   h' = (1 - z) * h + z * c
template <typename T>
Var<T> gru_cell_step(Var<T> x, Var<T> h_prev, const GruWeights<T>& w);

// Half-pixel-center bilinear resampling of the two trailing axes (no gradient).
// Source coordinates are (dst + 0.5) * in / out - 0.5, clamped to the valid range.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

}  // namespace magnifier
