#pragma once

#include "magnifier/ops.hpp"

namespace magnifier::maskhead {

// Two 3x3 conv + ReLU layers and a 1x1 conv to K logits, all at feature resolution.
template <typename T>
struct MaskHeadVars {
  Var<T> conv1_w, conv1_b;
  Var<T> conv2_w, conv2_b;
  Var<T> out_w, out_b;
};

// features [B,C,h,w] -> logits [B,K,h,w].
template <typename T>
Var<T> predict_masks(Var<T> features, const MaskHeadVars<T>& head);

// Mean per-pixel, per-channel binary cross-entropy against pseudo masks in [0,1].
template <typename T>
Var<T> mask_loss(Var<T> logits, const Tensor<T>& pseudo);

// Binary masks: 1 where sigmoid(logit) >= threshold.
template <typename T>
Tensor<T> binarize(const Tensor<T>& logits, double threshold = 0.5);

}  // namespace magnifier::maskhead
