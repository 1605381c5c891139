#include "magnifier/sfb.hpp"

#include <numeric>
#include <string>

#include "magnifier/errors.hpp"

namespace magnifier::sfb {

std::vector<std::size_t> default_region_order() {
  std::vector<std::size_t> order(8);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

void validate_region_order(std::span<const std::size_t> order, std::size_t k) {
  if (order.size() != k)
    throw ConfigError("sfb.region_order must list all " + std::to_string(k) + " regions");
  std::vector<bool> seen(k, false);
  for (auto r : order) {
    if (r >= k || seen[r]) throw ConfigError("sfb.region_order is not a permutation");
    seen[r] = true;
  }
}

template <typename T>
Var<T> fuse_sequential(std::span<const Var<T>> pooled, std::span<const std::size_t> order,
                       const GruWeights<T>& weights) {
  if (pooled.size() != order.size())
    throw DimensionError("fuse_sequential: " + std::to_string(pooled.size()) +
                         " pooled regions but order lists " + std::to_string(order.size()));
  if (pooled.empty()) throw ContractError("fuse_sequential: no regions");
  require_rank(pooled[0].shape(), 2, "fuse_sequential pooled");
  const std::size_t batch = pooled[0].shape()[0];
  const std::size_t hidden = weights.u_z.shape().at(0);
  auto h = pooled[0].tape->constant(Tensor<T>(Shape{batch, hidden}));
  for (auto r : order) {
    if (r >= pooled.size()) throw IndexError("fuse_sequential: region index out of range");
    h = gru_cell_step(pooled[r], h, weights);
  }
  return h;
}

std::size_t ablation_width(std::size_t hidden_dim, std::size_t regions) {
  if (regions == 0 || hidden_dim % regions != 0)
    throw ConfigError("ablation branch: hidden dim " + std::to_string(hidden_dim) +
                      " is not divisible by region count " + std::to_string(regions));
  return hidden_dim / regions;
}

template <typename T>
Var<T> ablation_branch(std::span<const Var<T>> pooled, std::span<const std::size_t> order,
                       std::span<const Var<T>> proj_w, std::span<const Var<T>> proj_b,
                       std::size_t hidden_dim) {
  const std::size_t k = pooled.size();
  const std::size_t width = ablation_width(hidden_dim, k);
  if (order.size() != k || proj_w.size() != k || proj_b.size() != k)
    throw DimensionError("ablation_branch: pooled, order and projections must have equal length");
  std::vector<Var<T>> parts;
  parts.reserve(k);
  for (auto r : order) {
    if (proj_w[r].shape().at(0) != width)
      throw DimensionError("ablation_branch: projection output (weight axis 0) must be Hd/K");
    parts.push_back(linear(pooled[r], proj_w[r], proj_b[r]));
  }
  return concat<T>(parts);
}

template <typename T>
std::vector<Var<T>> per_region_supervision(std::span<const Var<T>> pooled,
                                           std::span<const losses::NeckVars<T>> heads,
                                           std::span<const std::size_t> labels, BnMode mode) {
  if (mode != BnMode::kTrain)
    throw ContractError("per_region_supervision: only defined in train mode");
  if (heads.size() != pooled.size())
    throw DimensionError("per_region_supervision: one head per region required");
  if (labels.empty()) throw ContractError("per_region_supervision: labels required");
  std::vector<Var<T>> out;
  out.reserve(pooled.size());
  for (std::size_t k = 0; k < pooled.size(); ++k)
    out.push_back(losses::bnneck_cls(pooled[k], heads[k], labels, mode).cls_loss);
  return out;
}

#define MAGNIFIER_INSTANTIATE_SFB(T)                                                         \
  template Var<T> fuse_sequential(std::span<const Var<T>>, std::span<const std::size_t>,    \
                                  const GruWeights<T>&);                                    \
  template Var<T> ablation_branch(std::span<const Var<T>>, std::span<const std::size_t>,    \
                                  std::span<const Var<T>>, std::span<const Var<T>>,         \
                                  std::size_t);                                             \
  template std::vector<Var<T>> per_region_supervision(                                      \
      std::span<const Var<T>>, std::span<const losses::NeckVars<T>>,                         \
      std::span<const std::size_t>, BnMode);

MAGNIFIER_INSTANTIATE_SFB(float)
MAGNIFIER_INSTANTIATE_SFB(double)

}  // namespace magnifier::sfb
