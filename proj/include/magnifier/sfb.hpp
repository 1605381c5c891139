#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "magnifier/losses.hpp"
#include "magnifier/ops.hpp"

namespace magnifier::sfb {

// Default feed order: head, chest, upper_arm, lower_arm, upper_leg, lower_leg, foot, background.
std::vector<std::size_t> default_region_order();

// Throws ConfigError unless order is a permutation of [0, k).
void validate_region_order(std::span<const std::size_t> order, std::size_t k);

// h_0 = 0, h_i = GRU(pooled[order[i]], h_{i-1}); returns the last hidden state [B,Hd].
template <typename T>
Var<T> fuse_sequential(std::span<const Var<T>> pooled, std::span<const std::size_t> order,
                       const GruWeights<T>& weights);

// Comparator for the GRU: each pooled vector is projected by its own 1x1 conv
// (a linear map to Hd/K features) and the projections are concatenated in
// region order. proj_w[k] is [Hd/K, C], proj_b[k] is [Hd/K].
template <typename T>
Var<T> ablation_branch(std::span<const Var<T>> pooled, std::span<const std::size_t> order,
                       std::span<const Var<T>> proj_w, std::span<const Var<T>> proj_b,
                       std::size_t hidden_dim);

// Throws ConfigError when hidden_dim is not divisible by the region count.
std::size_t ablation_width(std::size_t hidden_dim, std::size_t regions);

// One cross-entropy per region through that region's own BNNeck head.
// Train mode only.
template <typename T>
std::vector<Var<T>> per_region_supervision(std::span<const Var<T>> pooled,
                                           std::span<const losses::NeckVars<T>> heads,
                                           std::span<const std::size_t> labels, BnMode mode);

}  // namespace magnifier::sfb
