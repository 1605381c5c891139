#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "magnifier/ops.hpp"
#include "magnifier/tape.hpp"

namespace magnifier::losses {

struct LossWeights {
  double gamma = 2e-3;       // semantic diversity weight
  double lambda_mask = 2.0;  // mask supervision weight
  double margin = 0.3;       // triplet margin
  double sd_epsilon = 1e-8;  // cosine denominator floor

  void validate() const;
};

struct LossReport {
  double l_cls = 0;
  double l_tri = 0;
  double l_sd = 0;
  double l_mask = 0;
  double l_total = 0;
};

// BNNeck: batchnorm over the embedding followed by a bias-free classifier.
template <typename T>
struct NeckVars {
  Var<T> bn_scale;
  Var<T> bn_shift;
  Var<T> classifier;  // [num_ids, D]
  BatchNormStats<T>* stats = nullptr;
};

template <typename T>
struct NeckOutput {
  Var<T> feature;  // post-neck embedding, used for retrieval
  Var<T> logits;
  Var<T> cls_loss;  // only set when labels were supplied
  bool has_loss = false;
};

inline constexpr double kNeckMomentum = 0.1;
inline constexpr double kNeckEps = 1e-5;

// Cross-entropy on classifier(batchnorm(embedding)). Triplet loss is meant to
// consume the pre-neck embedding. Pass empty labels to skip the loss.
template <typename T>
NeckOutput<T> bnneck_cls(Var<T> embedding, const NeckVars<T>& neck,
                         std::span<const std::size_t> labels, BnMode mode);

// Batch-hard triplet loss on Euclidean distances. For each anchor the farthest
// same-label sample and the nearest other-label sample form the triplet;
// anchors lacking either are skipped. Result is the mean hinge over the
// remaining anchors.
template <typename T>
Var<T> batch_hard_triplet(Var<T> embeddings, std::span<const std::size_t> labels, T margin);

// Mean over the batch and over unordered distinct region pairs (i < j) of
//   <p_i, p_j> / max(|p_i| |p_j|, epsilon).
// pooled: K tensors of shape [N,C].
template <typename T>
Var<T> sd_loss(std::span<const Var<T>> pooled, T epsilon);

template <typename T>
struct TotalLoss {
  Var<T> total;
  LossReport report;
};

// L_total = L_cls + L_tri + gamma * L_SD + lambda * L_mask.
// Throws TrainingAbort naming the first non-finite component.
template <typename T>
TotalLoss<T> total_loss(Var<T> l_cls, Var<T> l_tri, Var<T> l_sd, Var<T> l_mask,
                        const LossWeights& weights);

}  // namespace magnifier::losses
