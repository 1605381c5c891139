#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "magnifier/losses.hpp"
#include "magnifier/parameter.hpp"
#include "magnifier/rng.hpp"
#include "magnifier/sab.hpp"
#include "magnifier/semantics.hpp"

namespace magnifier::model {

// Which branches are built. SAB and SFB need region masks, so they require the mask head.
struct Components {
  bool mask = true;
  bool sab = true;
  bool sfb = true;
  // Replace the GRU with per-region 1x1 projections + concatenation.
  bool ablation = false;

  // "G", "G+M", "G+M+SAB", "G+M+SFB", "G+M+AB", "full" (G+M+SAB+SFB).
  static Components parse(const std::string& name);
  std::string name() const;
  void validate() const;
  bool uses_regions() const noexcept { return sab || sfb; }
};

struct ModelConfig {
  Components components;
  std::size_t channels = 64;  // c, width of F_cnn
  std::size_t hidden_dim = 64;
  std::vector<std::size_t> backbone_widths{16, 32};
  std::size_t backbone_kernel = 5;
  std::size_t mask_width = 32;
  std::vector<std::size_t> region_order = {0, 1, 2, 3, 4, 5, 6, 7};
  std::size_t num_classes = 16;
  std::size_t image_h = 64;
  std::size_t image_w = 32;
  double mask_threshold = 0.5;

  void validate() const;
  std::size_t feature_h() const noexcept { return image_h / 4; }
  std::size_t feature_w() const noexcept { return image_w / 4; }
  // Row width of the concatenated retrieval embedding.
  std::size_t embedding_dim() const noexcept;
};

// Per-step settings that only matter in train mode.
struct TrainContext {
  sab::Strategy strategy = sab::Strategy::kRandomTorso;
  std::size_t k_hat = 4;
  RngStream* rng = nullptr;
  losses::LossWeights weights;  // gamma here is the effective (stage) value
};

struct Forward {
  Var<float> features;     // post-ReLU F_cnn [B,c,h,w]
  Var<float> mask_logits;  // [B,K,h,w], mask head only
  Tensor<float> region_masks;  // masks fed to align, [B,K,h,w]
  std::vector<Var<float>> pooled;
  std::vector<Var<float>> branch_features;  // post-neck, retrieval order
  std::vector<sab::OcclusionPlan> plans;
  bool has_loss = false;
  losses::TotalLoss<float> loss;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet<float>& params() noexcept { return params_; }
  const ParameterSet<float>& params() const noexcept { return params_; }
  std::map<std::string, BatchNormStats<float>>& bn_stats() noexcept { return stats_; }
  const std::map<std::string, BatchNormStats<float>>& bn_stats() const noexcept { return stats_; }

  // Train mode needs ground-truth masks at image resolution, labels and ctx.
  // Eval mode skips losses and aligns with gt_masks when given, otherwise with
  // the mask head's binarized prediction.
  Forward forward(Tape<float>& tape, const Tensor<float>& images, const Tensor<float>* gt_masks,
                  std::span<const std::size_t> labels, BnMode mode,
                  const TrainContext* ctx = nullptr);

  // Eval-mode, L2-normalized concatenated post-neck embeddings [B, D].
  Tensor<float> embed(const Tensor<float>& images);
  // Eval-mode feature map F_cnn [B,c,h,w].
  Tensor<float> feature_map(const Tensor<float>& images);
  // Eval-mode binary masks [B,K,h,w] from the mask head (background forced to ones).
  Tensor<float> predict_region_masks(const Tensor<float>& images);

 private:
  Var<float> p(Tape<float>& tape, const std::string& name);
  Var<float> conv_bn_relu(Tape<float>& tape, Var<float> x, const std::string& prefix,
                          std::size_t stride, BnMode mode);
  losses::NeckVars<float> neck(Tape<float>& tape, const std::string& prefix);
  void add_param(const std::string& name, Shape shape, double std_dev, double fill = 0.0);
  void add_neck(const std::string& prefix, std::size_t dim);

  ModelConfig config_;
  std::uint64_t init_seed_;
  ParameterSet<float> params_;
  std::map<std::string, BatchNormStats<float>> stats_;
};

// Rows scaled to unit L2 norm (zero rows stay zero).
Tensor<float> l2_normalize_rows(const Tensor<float>& x);

}  // namespace magnifier::model
