#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "magnifier/losses.hpp"
#include "magnifier/model.hpp"
#include "magnifier/optim.hpp"
#include "magnifier/sab.hpp"

namespace magnifier {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t stage1_epochs = 46;
  std::size_t stage2_epochs = 4;
  double lr = 3.5e-4;
  double stage2_lr = 1e-3;
  std::size_t batch_p = 4;
  std::size_t batch_q = 4;
  OptimizerHyper optimizer;
  std::size_t k_hat = 4;
  sab::Strategy strategy = sab::Strategy::kRandomTorso;
  // The SD weight scales with the stage-2 step count: 64 steps here against
  // roughly 8,100 in a full-size schedule, so 2e-3 becomes 0.25.
  losses::LossWeights loss{.gamma = 0.25};
  model::Components components;
  std::size_t channels = 64;
  std::size_t backbone_kernel = 5;
  std::size_t hidden_dim = 64;
  std::vector<std::size_t> region_order{0, 1, 2, 3, 4, 5, 6, 7};
  double mask_threshold = 0.5;

  // Run controls; not part of the config hash.
  std::size_t eval_every = 5;
  std::size_t max_steps = 0;  // 0 runs the whole schedule

  void validate() const;

  // Flat dotted-key form, e.g. {"sab.k_hat": 4}. Canonical for hashing and diffs.
  std::map<std::string, std::string> flatten(bool include_run_controls = true) const;
  std::string to_json() const;
  // Accepts nested objects ({"sab": {"k_hat": 4}}) or dotted keys, mixed freely.
  // Unknown keys raise ConfigError listing the accepted ones.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig from_file(const std::string& path);

  std::string hash() const;
  model::ModelConfig model_config(std::size_t num_classes) const;
};

// Human-readable "key: a -> b" lines for every differing hashed key.
std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b);

const std::vector<std::string>& config_keys();

}  // namespace magnifier
