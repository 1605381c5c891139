#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "magnifier/tape.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier::semantics {

// Region channel order used by mask files, the mask head and the fusion branch.
enum Region : std::size_t {
  kHead = 0,
  kChest,
  kUpperArm,
  kLowerArm,
  kUpperLeg,
  kLowerLeg,
  kFoot,
  kBackground,
};

inline constexpr std::size_t kNumRegions = 8;
inline constexpr std::size_t kNumBodyParts = 7;

const std::array<std::string_view, kNumRegions>& region_names();
// Throws ConfigError for an unknown name.
std::size_t region_index(std::string_view name);

// Upper/lower torso groups used by Random-torso sampling. Background belongs to neither.
struct RegionPartition {
  std::vector<std::size_t> upper{kHead, kUpperArm, kLowerArm, kChest};
  std::vector<std::size_t> lower{kUpperLeg, kLowerLeg, kFoot};

  // Throws ConfigError unless the groups are disjoint body-part index sets.
  void validate() const;
};

// Per-region masked maps of the backbone output plus their pooled vectors.
template <typename T>
struct SemanticAlignedRep {
  std::vector<Var<T>> per_region_maps;  // K x [B,C,h,w]
  std::vector<Var<T>> pooled;           // K x [B,C]

  std::size_t regions() const noexcept { return per_region_maps.size(); }
};

// Bilinearly rescales masks ([K,H,W] or [B,K,H,W]) to the feature grid.
// Values stay fractional at region boundaries.
template <typename T>
Tensor<T> resize_masks(const Tensor<T>& masks, std::size_t feat_h, std::size_t feat_w);

// x_k = features * mask_k, the mask broadcast across channels.
// features [B,C,h,w]; masks [B,K,h,w].
template <typename T>
Var<T> mask_region(Var<T> features, const Tensor<T>& masks, std::size_t k);

template <typename T>
std::vector<Var<T>> align(Var<T> features, const Tensor<T>& resized_masks);

// Global max-pool of each region map.
template <typename T>
std::vector<Var<T>> pool_regions(std::span<const Var<T>> region_maps);

template <typename T>
SemanticAlignedRep<T> build_representation(Var<T> features, const Tensor<T>& resized_masks);

}  // namespace magnifier::semantics
