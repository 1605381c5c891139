#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "magnifier/losses.hpp"
#include "magnifier/rng.hpp"
#include "magnifier/semantics.hpp"

namespace magnifier::sab {

enum class Strategy { kRandomBaseline, kRandomTorso };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

// Regions that survive occlusion (the complement of the occluded set), ascending.
struct OcclusionPlan {
  std::vector<std::size_t> kept;

  std::size_t k_hat() const noexcept { return kept.size(); }
  bool keeps(std::size_t region) const;
};

// Uniform k_hat-subset of the body parts [0, k_parts).
OcclusionPlan sample_random_baseline(std::size_t k_parts, std::size_t k_hat, RngStream& rng);

// Independent uniform (k_hat/2)-subsets of the upper and lower torso groups.
OcclusionPlan sample_random_torso(const semantics::RegionPartition& partition, std::size_t k_hat,
                                  RngStream& rng);

OcclusionPlan sample_plan(Strategy strategy, std::size_t k_hat, RngStream& rng,
                          const semantics::RegionPartition& partition = {});

// Plan retaining every body part; used at inference.
OcclusionPlan keep_all_parts();

// Throws ConfigError when k_hat is invalid for the strategy.
void validate_k_hat(Strategy strategy, std::size_t k_hat,
                    const semantics::RegionPartition& partition = {});

// Per image b: GMP of the sum of the region maps kept by plans[b]. Returns [B,C].
template <typename T>
Var<T> adversarial_feature(std::span<const Var<T>> region_maps,
                           std::span<const OcclusionPlan> plans);

template <typename T>
struct SabOutput {
  Var<T> embedding;  // pre-neck, [B,C]
  losses::NeckOutput<T> neck;
  Var<T> triplet;
  bool has_losses = false;
  std::vector<OcclusionPlan> plans;
};

// Train mode draws a fresh plan per image from rng and returns cls/triplet
// losses; eval mode keeps every body part and ignores rng and labels.
template <typename T>
SabOutput<T> sab_forward(const semantics::SemanticAlignedRep<T>& rep,
                         const losses::NeckVars<T>& head, std::span<const std::size_t> labels,
                         BnMode mode, Strategy strategy, std::size_t k_hat, RngStream& rng,
                         T margin);

}  // namespace magnifier::sab
