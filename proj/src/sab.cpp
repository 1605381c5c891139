#include "magnifier/sab.hpp"

#include <algorithm>
#include <numeric>

#include "magnifier/errors.hpp"
#include "magnifier/ops.hpp"

namespace magnifier::sab {

Strategy parse_strategy(const std::string& name) {
  if (name == "random_torso") return Strategy::kRandomTorso;
  if (name == "random_baseline") return Strategy::kRandomBaseline;
  throw ConfigError("unknown sab.strategy '" + name + "' (expected random_torso|random_baseline)");
}

std::string to_string(Strategy s) {
  return s == Strategy::kRandomTorso ? "random_torso" : "random_baseline";
}

bool OcclusionPlan::keeps(std::size_t region) const {
  return std::binary_search(kept.begin(), kept.end(), region);
}

void validate_k_hat(Strategy strategy, std::size_t k_hat,
                    const semantics::RegionPartition& partition) {
  if (strategy == Strategy::kRandomBaseline) {
    if (k_hat < 1 || k_hat > semantics::kNumBodyParts)
      throw ConfigError("sab.k_hat must be in [1, " +
                        std::to_string(semantics::kNumBodyParts) + "] for random_baseline");
    return;
  }
  partition.validate();
  if (k_hat == 0 || k_hat % 2 != 0)
    throw ConfigError("sab.k_hat must be a positive even number for random_torso, got " +
                      std::to_string(k_hat));
  if (k_hat / 2 > std::min(partition.upper.size(), partition.lower.size()))
    throw ConfigError("sab.k_hat/2 exceeds the size of a torso group");
}

OcclusionPlan sample_random_baseline(std::size_t k_parts, std::size_t k_hat, RngStream& rng) {
  if (k_hat < 1 || k_hat > k_parts)
    throw ConfigError("random_baseline: k_hat " + std::to_string(k_hat) + " outside [1, " +
                      std::to_string(k_parts) + "]");
  return OcclusionPlan{rng.subset(k_parts, k_hat)};
}

OcclusionPlan sample_random_torso(const semantics::RegionPartition& partition, std::size_t k_hat,
                                  RngStream& rng) {
  validate_k_hat(Strategy::kRandomTorso, k_hat, partition);
  const std::size_t half = k_hat / 2;
  OcclusionPlan plan;
  for (const auto* group : {&partition.upper, &partition.lower})
    for (auto i : rng.subset(group->size(), half)) plan.kept.push_back((*group)[i]);
  std::sort(plan.kept.begin(), plan.kept.end());
  return plan;
}

OcclusionPlan sample_plan(Strategy strategy, std::size_t k_hat, RngStream& rng,
                          const semantics::RegionPartition& partition) {
  return strategy == Strategy::kRandomTorso
             ? sample_random_torso(partition, k_hat, rng)
             : sample_random_baseline(semantics::kNumBodyParts, k_hat, rng);
}

OcclusionPlan keep_all_parts() {
  OcclusionPlan plan;
  plan.kept.resize(semantics::kNumBodyParts);
  std::iota(plan.kept.begin(), plan.kept.end(), std::size_t{0});
  return plan;
}

template <typename T>
Var<T> adversarial_feature(std::span<const Var<T>> region_maps,
                           std::span<const OcclusionPlan> plans) {
  if (region_maps.empty()) throw ContractError("adversarial_feature: no region maps");
  require_rank(region_maps[0].shape(), 4, "adversarial_feature region map");
  const Shape shape = region_maps[0].shape();
  for (const auto& m : region_maps) require_same_shape(m.shape(), shape, "adversarial_feature");
  const std::size_t n = shape[0];
  if (plans.size() != n)
    throw DimensionError("adversarial_feature: " + std::to_string(plans.size()) +
                         " plans for batch axis 0 of " + std::to_string(n));
  for (const auto& p : plans) {
    if (p.kept.empty())
      throw ContractError("adversarial_feature: plan keeps no region; the identity would be "
                          "unrepresentable");
    for (auto k : p.kept)
      if (k >= region_maps.size())
        throw IndexError("adversarial_feature: plan index " + std::to_string(k) +
                         " out of range");
  }
  const std::size_t per_image = shape_size(shape) / n;
  Tensor<T> summed(shape);
  for (std::size_t b = 0; b < n; ++b) {
    T* dst = summed.data().data() + b * per_image;
    for (auto k : plans[b].kept) {
      const T* src = region_maps[k].value().data().data() + b * per_image;
      for (std::size_t q = 0; q < per_image; ++q) dst[q] += src[q];
    }
  }
  std::vector<std::size_t> ids;
  for (const auto& m : region_maps) ids.push_back(m.id);
  std::vector<std::vector<std::size_t>> kept;
  for (const auto& p : plans) kept.push_back(p.kept);
  auto total = region_maps[0].tape->record(
      std::move(summed), region_maps,
      [ids, kept = std::move(kept), per_image](Tape<T>& t, std::size_t self) {
        const T* g = t.grad_of(self)->data().data();
        for (std::size_t b = 0; b < kept.size(); ++b)
          for (auto k : kept[b]) {
            if (!t.requires_grad(ids[k])) continue;
            T* d = t.grad_buffer(ids[k]).data().data() + b * per_image;
            for (std::size_t q = 0; q < per_image; ++q) d[q] += g[b * per_image + q];
          }
      });
  return global_max_pool(total);
}

template <typename T>
SabOutput<T> sab_forward(const semantics::SemanticAlignedRep<T>& rep,
                         const losses::NeckVars<T>& head, std::span<const std::size_t> labels,
                         BnMode mode, Strategy strategy, std::size_t k_hat, RngStream& rng,
                         T margin) {
  if (rep.per_region_maps.empty()) throw ContractError("sab_forward: empty representation");
  const std::size_t n = rep.per_region_maps[0].shape()[0];
  SabOutput<T> out;
  if (mode == BnMode::kTrain) {
    if (labels.size() != n) throw ContractError("sab_forward: train mode requires labels");
    out.plans.reserve(n);
    for (std::size_t b = 0; b < n; ++b) out.plans.push_back(sample_plan(strategy, k_hat, rng));
  } else {
    out.plans.assign(n, keep_all_parts());
  }
  out.embedding = adversarial_feature<T>(rep.per_region_maps, out.plans);
  if (mode == BnMode::kTrain) {
    out.neck = losses::bnneck_cls(out.embedding, head, labels, mode);
    out.triplet = losses::batch_hard_triplet(out.embedding, labels, margin);
    out.has_losses = true;
  } else {
    out.neck = losses::bnneck_cls<T>(out.embedding, head, {}, mode);
  }
  return out;
}

#define MAGNIFIER_INSTANTIATE_SAB(T)                                                        \
  template Var<T> adversarial_feature(std::span<const Var<T>>,                             \
                                      std::span<const OcclusionPlan>);                     \
  template SabOutput<T> sab_forward(const semantics::SemanticAlignedRep<T>&,                \
                                    const losses::NeckVars<T>&, std::span<const std::size_t>, \
                                    BnMode, Strategy, std::size_t, RngStream&, T);

MAGNIFIER_INSTANTIATE_SAB(float)
MAGNIFIER_INSTANTIATE_SAB(double)

}  // namespace magnifier::sab
