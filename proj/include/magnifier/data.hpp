#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "magnifier/rng.hpp"
#include "magnifier/semantics.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier::data {

struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t num_ids = 32;
  std::size_t imgs_per_id = 16;
  // Probability that a query gets 1-3 body parts blacked out in the occluded split.
  double occlusion_rate = 1.0;
  std::size_t height = 64;
  std::size_t width = 32;

  void validate() const;
};

// Body parts are laid out on a grid of kCell x kCell pixel blocks so that
// masks stay binary at the 4x-downsampled feature resolution.
inline constexpr std::size_t kCell = 4;

struct PartAppearance {
  std::array<float, 3> color{};
  float texture_amp = 0.2f;
};

struct SyntheticIdentity {
  std::size_t id = 0;
  std::array<PartAppearance, semantics::kNumBodyParts> parts{};
};

// Identities come in families that share a colour multiset assigned to
// different parts, so whole-image colour statistics alone cannot separate them.
std::vector<SyntheticIdentity> make_identities(std::uint64_t seed, std::size_t num_ids);

// Number of body parts whose appearance differs.
std::size_t appearance_distance(const SyntheticIdentity& a, const SyntheticIdentity& b);

struct Sample {
  Tensor<float> image;  // [3,H,W] in [0,1]
  Tensor<float> masks;  // [8,H,W]; parts binary and disjoint, background all ones
  std::size_t identity = 0;
  std::size_t camera = 0;
};

Sample render_sample(const SyntheticIdentity& who, std::size_t camera, std::size_t height,
                     std::size_t width, RngStream& rng);

// Blacks out the given body parts in pixel space.
Tensor<float> occlude(const Tensor<float>& image, const Tensor<float>& masks,
                      const std::vector<std::size_t>& parts);

struct Record {
  std::string image;
  std::string mask;
  std::size_t identity = 0;
  std::size_t label = 0;  // contiguous class index for training identities
  std::size_t camera = 0;
  std::vector<std::size_t> occluded_parts;
};

struct Manifest {
  DatasetSpec spec;
  std::size_t num_train_ids = 0;
  std::vector<Record> train, query, gallery, occluded;

  const std::vector<Record>& split(const std::string& name) const;
  std::string to_json() const;
  static Manifest from_json(const std::string& text);
};

// Writes manifest.json plus images/ and masks/ MGT1 files under out.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out);

Manifest load_manifest(const std::filesystem::path& dir);

struct SplitData {
  Tensor<float> images;  // [N,3,H,W]
  Tensor<float> masks;   // [N,8,H,W]
  std::vector<std::size_t> identities;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> cameras;

  std::size_t size() const noexcept { return identities.size(); }
};

SplitData load_split(const std::filesystem::path& dir, const Manifest& manifest,
                     const std::string& name);

// Rows `indices` of a split, stacked in order.
SplitData gather(const SplitData& split, const std::vector<std::size_t>& indices);

// Batches of P identities x Q images (indices into `labels`). Identities are
// visited in shuffled order so every identity appears once per P-chunk pass;
// identities with fewer than Q images are sampled with replacement.
std::vector<std::vector<std::size_t>> pk_batch_sampler(const std::vector<std::size_t>& labels,
                                                       std::size_t p, std::size_t q,
                                                       std::size_t num_batches, RngStream& rng);

// max(ceil(ids / P), round(images / (P * Q))).
std::size_t batches_per_epoch(std::size_t num_ids, std::size_t num_images, std::size_t p,
                              std::size_t q);

}  // namespace magnifier::data
