#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "magnifier/data.hpp"
#include "magnifier/model.hpp"
#include "magnifier/semantics.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier::evalkit {

struct EmbeddingMatrix {
  Tensor<float> rows;  // [N,D]
  std::vector<std::size_t> identities;
  std::vector<std::size_t> cameras;

  std::size_t size() const noexcept { return identities.size(); }
};

// Eval-mode embeddings (no occlusion, predicted masks), L2-normalized rows.
EmbeddingMatrix extract_embeddings(model::Model& model, const data::SplitData& split,
                                   std::size_t batch_size = 64);

struct RetrievalResult {
  std::vector<double> cmc;  // cmc[r] = hit rate within rank r + 1
  double map = 0;
  std::vector<double> ap;   // per query; NaN for skipped queries
  std::size_t valid = 0;
  std::size_t skipped = 0;  // queries without any valid gallery match

  double rank1() const { return cmc.empty() ? 0.0 : cmc[0]; }
};

// Euclidean distances between L2-normalized rows, [Q][G]. Query chunks run on
// separate threads; each entry is computed by the same serial loop.
std::vector<std::vector<double>> pairwise_distances(const Tensor<float>& query,
                                                    const Tensor<float>& gallery,
                                                    std::size_t threads = 0);

// Ranking by ascending distance, ties broken by gallery index. Gallery items
// sharing identity and camera with the query are dropped.
RetrievalResult rank_from_distances(const std::vector<std::vector<double>>& dist,
                                    const std::vector<std::size_t>& query_ids,
                                    const std::vector<std::size_t>& query_cams,
                                    const std::vector<std::size_t>& gallery_ids,
                                    const std::vector<std::size_t>& gallery_cams,
                                    std::size_t max_rank = 20);

RetrievalResult retrieve(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery,
                         std::size_t max_rank = 20, std::size_t threads = 0);

std::string report_json(const RetrievalResult& r, const std::string& split,
                        const std::string& checkpoint);

// [N,D] rows as MGT1, plus a sidecar <path>.json with identities and cameras.
void export_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m);

// Per-part IoU of the mask head's binarized prediction against ground-truth
// masks resized to feature resolution, pooled over the whole split.
std::array<double, semantics::kNumBodyParts> mask_iou(model::Model& model,
                                                      const data::SplitData& split,
                                                      std::size_t batch_size = 64);

// Mean pairwise cosine between pooled region features (eval mode, ground-truth
// masks), averaged over the batch. Same quantity as the diversity loss.
double region_cosine(model::Model& model, const data::SplitData& batch);

}  // namespace magnifier::evalkit
