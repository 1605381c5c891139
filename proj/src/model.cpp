#include "magnifier/model.hpp"

#include <cmath>

#include "magnifier/errors.hpp"
#include "magnifier/maskhead.hpp"
#include "magnifier/sfb.hpp"

namespace magnifier::model {

namespace sem = semantics;

Components Components::parse(const std::string& name) {
  Components c;
  if (name == "G") return {false, false, false, false};
  if (name == "G+M") return {true, false, false, false};
  if (name == "G+M+SAB") return {true, true, false, false};
  if (name == "G+M+SFB") return {true, false, true, false};
  if (name == "G+M+AB") return {true, false, true, true};
  if (name == "full" || name == "G+M+SAB+SFB") return c;
  if (name == "G+M+SAB+AB") return {true, true, true, true};
  throw ConfigError("unknown model.components '" + name +
                    "' (expected G, G+M, G+M+SAB, G+M+SFB, G+M+AB, G+M+SAB+AB or full)");
}

std::string Components::name() const {
  std::string s = "G";
  if (mask) s += "+M";
  if (sab) s += "+SAB";
  if (sfb) s += ablation ? "+AB" : "+SFB";
  return s == "G+M+SAB+SFB" ? "full" : s;
}

void Components::validate() const {
  if (uses_regions() && !mask)
    throw ConfigError("model: SAB/SFB need region masks, enable the mask head");
  if (ablation && !sfb) throw ConfigError("model: the ablation branch replaces SFB");
}

void ModelConfig::validate() const {
  components.validate();
  if (channels == 0 || hidden_dim == 0 || num_classes < 2)
    throw ConfigError("model: channels, hidden_dim must be positive and num_classes >= 2");
  if (backbone_widths.size() != 2)
    throw ConfigError("model: backbone_widths lists the two strided stage widths");
  if (backbone_kernel % 2 == 0) throw ConfigError("model.backbone_kernel must be odd");
  if (image_h % 4 || image_w % 4) throw ConfigError("model: image size must be divisible by 4");
  sfb::validate_region_order(region_order, sem::kNumRegions);
  if (components.ablation) sfb::ablation_width(hidden_dim, sem::kNumRegions);
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0))
    throw ConfigError("mask.threshold must lie in (0, 1)");
}

std::size_t ModelConfig::embedding_dim() const noexcept {
  std::size_t d = channels;
  if (components.sab) d += channels;
  if (components.sfb) d += hidden_dim;
  return d;
}

Model::Model(ModelConfig config, std::uint64_t init_seed)
    : config_(std::move(config)), init_seed_(init_seed) {
  config_.validate();
  const std::size_t c = config_.channels;
  const std::size_t w1 = config_.backbone_widths[0], w2 = config_.backbone_widths[1];
  const std::array<std::size_t, 4> widths{3, w1, w2, c};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string pre = "backbone.conv" + std::to_string(i + 1);
    const std::size_t k = config_.backbone_kernel;
    const double fan_in = static_cast<double>(widths[i] * k * k);
    add_param(pre + ".w", {widths[i + 1], widths[i], k, k}, std::sqrt(2.0 / fan_in));
    add_param(pre + ".b", {widths[i + 1]}, 0.0);
    add_param(pre + ".bn.scale", {widths[i + 1]}, 0.0, 1.0);
    add_param(pre + ".bn.shift", {widths[i + 1]}, 0.0);
    stats_.emplace(pre + ".bn", BatchNormStats<float>(widths[i + 1]));
  }
  add_neck("global", c);

  if (config_.components.mask) {
    const std::size_t m = config_.mask_width;
    add_param("mask.conv1.w", {m, c, 3, 3}, std::sqrt(2.0 / (c * 9.0)));
    add_param("mask.conv1.b", {m}, 0.0);
    add_param("mask.conv2.w", {m, m, 3, 3}, std::sqrt(2.0 / (m * 9.0)));
    add_param("mask.conv2.b", {m}, 0.0);
    add_param("mask.out.w", {sem::kNumRegions, m, 1, 1}, std::sqrt(1.0 / m));
    add_param("mask.out.b", {sem::kNumRegions}, 0.0);
  }
  if (config_.components.sab) add_neck("sab", c);
  if (config_.components.sfb) {
    const std::size_t hd = config_.hidden_dim;
    if (config_.components.ablation) {
      const std::size_t per = sfb::ablation_width(hd, sem::kNumRegions);
      for (std::size_t k = 0; k < sem::kNumRegions; ++k) {
        const std::string pre = "ab.proj" + std::to_string(k);
        add_param(pre + ".w", {per, c}, std::sqrt(1.0 / c));
        add_param(pre + ".b", {per}, 0.0);
      }
    } else {
      const double s = 1.0 / std::sqrt(static_cast<double>(hd));
      for (const char* gate : {"z", "r", "h"}) {
        add_param(std::string("sfb.gru.w_") + gate, {hd, c}, s);
        add_param(std::string("sfb.gru.u_") + gate, {hd, hd}, s);
        add_param(std::string("sfb.gru.b_") + gate, {hd}, 0.0);
      }
    }
    add_neck("sfb", hd);
    for (std::size_t k = 0; k < sem::kNumRegions; ++k) add_neck("region" + std::to_string(k), c);
  }
}

void Model::add_param(const std::string& name, Shape shape, double std_dev, double fill) {
  Tensor<float> t(std::move(shape), static_cast<float>(fill));
  if (std_dev > 0.0) {
    // Each tensor has its own stream, so adding a branch never shifts another's init.
    RngStream rng(RngStream::derive(init_seed_, name));
    for (auto& v : t.data()) v = static_cast<float>(std_dev * rng.normal());
  }
  params_.add(name, std::move(t));
}

void Model::add_neck(const std::string& prefix, std::size_t dim) {
  add_param(prefix + ".neck.scale", {dim}, 0.0, 1.0);
  add_param(prefix + ".neck.shift", {dim}, 0.0);
  add_param(prefix + ".classifier", {config_.num_classes, dim}, 0.01);
  stats_.emplace(prefix + ".neck", BatchNormStats<float>(dim));
}

Var<float> Model::p(Tape<float>& tape, const std::string& name) {
  return tape.parameter(params_.at(name));
}

Var<float> Model::conv_bn_relu(Tape<float>& tape, Var<float> x, const std::string& prefix,
                               std::size_t stride, BnMode mode) {
  auto w = p(tape, prefix + ".w");
  const std::size_t pad = w.value().shape()[2] / 2;
  auto y = conv2d(x, w, p(tape, prefix + ".b"), stride, pad);
  y = batchnorm(y, p(tape, prefix + ".bn.scale"), p(tape, prefix + ".bn.shift"),
                stats_.at(prefix + ".bn"), mode, 0.1f, 1e-5f);
  return relu(y);
}

losses::NeckVars<float> Model::neck(Tape<float>& tape, const std::string& prefix) {
  return {p(tape, prefix + ".neck.scale"), p(tape, prefix + ".neck.shift"),
          p(tape, prefix + ".classifier"), &stats_.at(prefix + ".neck")};
}

Forward Model::forward(Tape<float>& tape, const Tensor<float>& images,
                       const Tensor<float>* gt_masks, std::span<const std::size_t> labels,
                       BnMode mode, const TrainContext* ctx) {
  const bool train = mode == BnMode::kTrain;
  require_rank(images.shape(), 4, "model input");
  if (images.shape()[1] != 3 || images.shape()[2] != config_.image_h ||
      images.shape()[3] != config_.image_w)
    throw DimensionError("model: expected images [B,3," + std::to_string(config_.image_h) + "," +
                         std::to_string(config_.image_w) + "], got " +
                         shape_str(images.shape()));
  if (train && (!ctx || !ctx->rng || labels.size() != images.shape()[0]))
    throw ContractError("model: train mode needs labels and a TrainContext with an rng");
  if (train && config_.components.mask && !gt_masks)
    throw ContractError("model: train mode with the mask head needs ground-truth masks");

  Forward out;
  auto x = tape.constant(images);
  x = conv_bn_relu(tape, x, "backbone.conv1", 2, mode);
  x = conv_bn_relu(tape, x, "backbone.conv2", 2, mode);
  out.features = conv_bn_relu(tape, x, "backbone.conv3", 1, mode);
  const std::size_t fh = config_.feature_h(), fw = config_.feature_w();

  std::vector<Var<float>> cls_terms, tri_terms;
  const float margin = ctx ? static_cast<float>(ctx->weights.margin) : 0.3f;

  // Global branch.
  auto global = global_max_pool(out.features);
  auto g = losses::bnneck_cls(global, neck(tape, "global"), train ? labels : std::span<const std::size_t>{}, mode);
  out.branch_features.push_back(g.feature);
  if (train) {
    cls_terms.push_back(g.cls_loss);
    tri_terms.push_back(losses::batch_hard_triplet(global, labels, margin));
  }

  Var<float> l_mask = tape.constant(Tensor<float>::scalar(0.f));
  if (config_.components.mask) {
    maskhead::MaskHeadVars<float> head{p(tape, "mask.conv1.w"), p(tape, "mask.conv1.b"),
                                       p(tape, "mask.conv2.w"), p(tape, "mask.conv2.b"),
                                       p(tape, "mask.out.w"),   p(tape, "mask.out.b")};
    out.mask_logits = maskhead::predict_masks(out.features, head);
    if (gt_masks) {
      out.region_masks = sem::resize_masks(*gt_masks, fh, fw);
      if (train) l_mask = maskhead::mask_loss(out.mask_logits, out.region_masks);
    } else {
      out.region_masks = maskhead::binarize(out.mask_logits.value(), config_.mask_threshold);
      // Background aggregates every pixel regardless of the prediction.
      const std::size_t plane = fh * fw, n = images.shape()[0];
      for (std::size_t b = 0; b < n; ++b)
        std::fill_n(out.region_masks.storage().begin() +
                        (b * sem::kNumRegions + sem::kBackground) * plane,
                    plane, 1.f);
    }
  }

  Var<float> l_sd = tape.constant(Tensor<float>::scalar(0.f));
  if (config_.components.uses_regions()) {
    auto rep = sem::build_representation(out.features, out.region_masks);
    out.pooled = rep.pooled;
    if (config_.components.sab) {
      RngStream unused;
      RngStream& rng = train ? *ctx->rng : unused;
      auto s = sab::sab_forward(rep, neck(tape, "sab"), train ? labels : std::span<const std::size_t>{},
                                mode, ctx ? ctx->strategy : sab::Strategy::kRandomTorso,
                                ctx ? ctx->k_hat : 4, rng, margin);
      out.branch_features.push_back(s.neck.feature);
      out.plans = std::move(s.plans);
      if (train) {
        cls_terms.push_back(s.neck.cls_loss);
        tri_terms.push_back(s.triplet);
      }
    }
    if (config_.components.sfb) {
      Var<float> fused;
      if (config_.components.ablation) {
        std::vector<Var<float>> w, b;
        for (std::size_t k = 0; k < sem::kNumRegions; ++k) {
          w.push_back(p(tape, "ab.proj" + std::to_string(k) + ".w"));
          b.push_back(p(tape, "ab.proj" + std::to_string(k) + ".b"));
        }
        fused = sfb::ablation_branch<float>(rep.pooled, config_.region_order, w, b,
                                            config_.hidden_dim);
      } else {
        GruWeights<float> gw{p(tape, "sfb.gru.w_z"), p(tape, "sfb.gru.u_z"), p(tape, "sfb.gru.b_z"),
                             p(tape, "sfb.gru.w_r"), p(tape, "sfb.gru.u_r"), p(tape, "sfb.gru.b_r"),
                             p(tape, "sfb.gru.w_h"), p(tape, "sfb.gru.u_h"), p(tape, "sfb.gru.b_h")};
        fused = sfb::fuse_sequential<float>(rep.pooled, config_.region_order, gw);
      }
      auto f = losses::bnneck_cls(fused, neck(tape, "sfb"),
                                  train ? labels : std::span<const std::size_t>{}, mode);
      out.branch_features.push_back(f.feature);
      if (train) {
        cls_terms.push_back(f.cls_loss);
        tri_terms.push_back(losses::batch_hard_triplet(fused, labels, margin));
        std::vector<losses::NeckVars<float>> heads;
        for (std::size_t k = 0; k < sem::kNumRegions; ++k)
          heads.push_back(neck(tape, "region" + std::to_string(k)));
        auto per_region = sfb::per_region_supervision<float>(rep.pooled, heads, labels, mode);
        const std::vector<float> avg(per_region.size(), 1.f / per_region.size());
        cls_terms.push_back(weighted_sum<float>(per_region, avg));
      }
    }
    if (train) l_sd = losses::sd_loss<float>(rep.pooled, static_cast<float>(ctx->weights.sd_epsilon));
  }

  if (train) {
    const std::vector<float> cw(cls_terms.size(), 1.f / cls_terms.size());
    const std::vector<float> tw(tri_terms.size(), 1.f / tri_terms.size());
    auto l_cls = weighted_sum<float>(cls_terms, cw);
    auto l_tri = weighted_sum<float>(tri_terms, tw);
    out.loss = losses::total_loss(l_cls, l_tri, l_sd, l_mask, ctx->weights);
    out.has_loss = true;
  }
  return out;
}

Tensor<float> l2_normalize_rows(const Tensor<float>& x) {
  require_rank(x.shape(), 2, "l2_normalize_rows");
  Tensor<float> out = x;
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(x[i * d + j]) * x[i * d + j];
    if (s == 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>(x[i * d + j] * inv);
  }
  return out;
}

Tensor<float> Model::embed(const Tensor<float>& images) {
  Tape<float> tape;
  auto fwd = forward(tape, images, nullptr, {}, BnMode::kEval);
  return l2_normalize_rows(concat<float>(fwd.branch_features).value());
}

Tensor<float> Model::feature_map(const Tensor<float>& images) {
  Tape<float> tape;
  return forward(tape, images, nullptr, {}, BnMode::kEval).features.value();
}

Tensor<float> Model::predict_region_masks(const Tensor<float>& images) {
  if (!config_.components.mask) throw ContractError("model: no mask head in this configuration");
  Tape<float> tape;
  return forward(tape, images, nullptr, {}, BnMode::kEval).region_masks;
}

}  // namespace magnifier::model
