#include "magnifier/semantics.hpp"

#include <algorithm>
#include <string>

#include "magnifier/errors.hpp"
#include "magnifier/ops.hpp"

namespace magnifier::semantics {

const std::array<std::string_view, kNumRegions>& region_names() {
  static const std::array<std::string_view, kNumRegions> names{
      "head", "chest", "upper_arm", "lower_arm", "upper_leg", "lower_leg", "foot", "background"};
  return names;
}

std::size_t region_index(std::string_view name) {
  const auto& names = region_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ConfigError("unknown region '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - names.begin());
}

void RegionPartition::validate() const {
  std::array<int, kNumRegions> seen{};
  for (const auto* group : {&upper, &lower}) {
    if (group->empty()) throw ConfigError("RegionPartition: empty torso group");
    for (auto k : *group) {
      if (k >= kNumBodyParts) throw ConfigError("RegionPartition: index is not a body part");
      if (seen[k]++) throw ConfigError("RegionPartition: groups overlap");
    }
  }
}

template <typename T>
Tensor<T> resize_masks(const Tensor<T>& masks, std::size_t feat_h, std::size_t feat_w) {
  if (masks.rank() != 3 && masks.rank() != 4)
    throw DimensionError("resize_masks: expected [K,H,W] or [B,K,H,W], got " +
                         shape_str(masks.shape()));
  return bilinear_resize(masks, feat_h, feat_w);
}

template <typename T>
Var<T> mask_region(Var<T> features, const Tensor<T>& masks, std::size_t k) {
  require_rank(features.shape(), 4, "align features");
  require_rank(masks.shape(), 4, "align masks");
  const auto& fs = features.shape();
  const auto& ms = masks.shape();
  if (ms[2] != fs[2] || ms[3] != fs[3])
    throw DimensionError("align: masks are " + std::to_string(ms[2]) + "x" +
                         std::to_string(ms[3]) + " but features are " + std::to_string(fs[2]) +
                         "x" + std::to_string(fs[3]) +
                         "; resize the masks to the feature grid first (resize_masks)");
  if (ms[0] != fs[0]) throw DimensionError("align: masks and features differ on batch axis 0");
  if (k >= ms[1]) throw IndexError("align: region index out of range");
  const std::size_t n = fs[0], c = fs[1], hw = fs[2] * fs[3], kk = ms[1];
  Tensor<T> out(fs);
  const T* f = features.value().data().data();
  T* o = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* m = masks.data().data() + (b * kk + k) * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) o[base + q] = f[base + q] * m[q];
    }
  }
  // Copy of the single mask channel used by backward.
  std::vector<T> mk(n * hw);
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(masks.data().data() + (b * kk + k) * hw, hw, mk.data() + b * hw);
  return features.tape->record(std::move(out), {features},
                               [ix = features.id, n, c, hw, mk = std::move(mk)](
                                   Tape<T>& t, std::size_t self) {
                                 const T* g = t.grad_of(self)->data().data();
                                 T* dx = t.grad_buffer(ix).data().data();
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     const std::size_t base = (b * c + ch) * hw;
                                     for (std::size_t q = 0; q < hw; ++q)
                                       dx[base + q] += g[base + q] * mk[b * hw + q];
                                   }
                               });
}

template <typename T>
std::vector<Var<T>> align(Var<T> features, const Tensor<T>& resized_masks) {
  require_rank(resized_masks.shape(), 4, "align masks");
  std::vector<Var<T>> maps;
  maps.reserve(resized_masks.shape()[1]);
  for (std::size_t k = 0; k < resized_masks.shape()[1]; ++k)
    maps.push_back(mask_region(features, resized_masks, k));
  return maps;
}

template <typename T>
std::vector<Var<T>> pool_regions(std::span<const Var<T>> region_maps) {
  std::vector<Var<T>> pooled;
  pooled.reserve(region_maps.size());
  for (const auto& m : region_maps) pooled.push_back(global_max_pool(m));
  return pooled;
}

template <typename T>
SemanticAlignedRep<T> build_representation(Var<T> features, const Tensor<T>& resized_masks) {
  SemanticAlignedRep<T> rep;
  rep.per_region_maps = align(features, resized_masks);
  rep.pooled = pool_regions<T>(rep.per_region_maps);
  return rep;
}

#define MAGNIFIER_INSTANTIATE_SEMANTICS(T)                                              \
  template Tensor<T> resize_masks(const Tensor<T>&, std::size_t, std::size_t);        \
  template Var<T> mask_region(Var<T>, const Tensor<T>&, std::size_t);                 \
  template std::vector<Var<T>> align(Var<T>, const Tensor<T>&);                       \
  template std::vector<Var<T>> pool_regions(std::span<const Var<T>>);                 \
  template SemanticAlignedRep<T> build_representation(Var<T>, const Tensor<T>&);

MAGNIFIER_INSTANTIATE_SEMANTICS(float)
MAGNIFIER_INSTANTIATE_SEMANTICS(double)

}  // namespace magnifier::semantics
