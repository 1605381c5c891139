#include "magnifier/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "magnifier/errors.hpp"
#include "magnifier/losses.hpp"
#include "magnifier/mgt.hpp"
#include "magnifier/ops.hpp"

namespace magnifier::evalkit {

using json = nlohmann::json;

namespace {

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

}  // namespace

EmbeddingMatrix extract_embeddings(model::Model& model, const data::SplitData& split,
                                   std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("extract_embeddings: batch_size must be > 0");
  EmbeddingMatrix out;
  out.identities = split.identities;
  out.cameras = split.cameras;
  const std::size_t n = split.size();
  const std::size_t d = model.config().embedding_dim();
  out.rows = Tensor<float>(Shape{n, d});
  for (std::size_t lo = 0; lo < n; lo += batch_size) {
    const std::size_t hi = std::min(n, lo + batch_size);
    const auto part = data::gather(split, range(lo, hi));
    const auto e = model.embed(part.images);
    std::copy(e.storage().begin(), e.storage().end(), out.rows.storage().begin() + lo * d);
  }
  return out;
}

std::vector<std::vector<double>> pairwise_distances(const Tensor<float>& query,
                                                    const Tensor<float>& gallery,
                                                    std::size_t threads) {
  require_rank(query.shape(), 2, "pairwise_distances query");
  require_rank(gallery.shape(), 2, "pairwise_distances gallery");
  if (query.dim(1) != gallery.dim(1))
    throw DimensionError("pairwise_distances: query dim " + std::to_string(query.dim(1)) +
                         " != gallery dim " + std::to_string(gallery.dim(1)));
  const auto q = model::l2_normalize_rows(query);
  const auto g = model::l2_normalize_rows(gallery);
  const std::size_t nq = q.dim(0), ng = g.dim(0), d = q.dim(1);
  std::vector<std::vector<double>> dist(nq, std::vector<double>(ng));

  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < ng; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = static_cast<double>(q[i * d + k]) - g[j * d + k];
          s += diff * diff;
        }
        dist[i][j] = std::sqrt(s);
      }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(nq, 1));
  if (threads <= 1) {
    work(0, nq);
    return dist;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (nq + threads - 1) / threads;
  for (std::size_t lo = 0; lo < nq; lo += chunk)
    pool.emplace_back(work, lo, std::min(nq, lo + chunk));
  for (auto& t : pool) t.join();
  return dist;
}

RetrievalResult rank_from_distances(const std::vector<std::vector<double>>& dist,
                                    const std::vector<std::size_t>& query_ids,
                                    const std::vector<std::size_t>& query_cams,
                                    const std::vector<std::size_t>& gallery_ids,
                                    const std::vector<std::size_t>& gallery_cams,
                                    std::size_t max_rank) {
  const std::size_t nq = dist.size(), ng = gallery_ids.size();
  if (query_ids.size() != nq || query_cams.size() != nq || gallery_cams.size() != ng)
    throw DimensionError("retrieve: identity/camera lists do not match the distance matrix");
  if (max_rank == 0) throw ConfigError("retrieve: max_rank must be > 0");
  RetrievalResult out;
  out.cmc.assign(max_rank, 0.0);
  out.ap.assign(nq, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> order(ng);
  for (std::size_t qi = 0; qi < nq; ++qi) {
    if (dist[qi].size() != ng) throw DimensionError("retrieve: ragged distance matrix");
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist[qi][a] < dist[qi][b]; });
    std::size_t rank = 0, hits = 0, first = std::numeric_limits<std::size_t>::max();
    double ap = 0;
    for (auto gi : order) {
      const bool same_id = gallery_ids[gi] == query_ids[qi];
      if (same_id && gallery_cams[gi] == query_cams[qi]) continue;
      ++rank;
      if (!same_id) continue;
      ++hits;
      if (first == std::numeric_limits<std::size_t>::max()) first = rank - 1;
      ap += static_cast<double>(hits) / static_cast<double>(rank);
    }
    if (hits == 0) {
      ++out.skipped;
      continue;
    }
    ++out.valid;
    out.ap[qi] = ap / static_cast<double>(hits);
    out.map += out.ap[qi];
    for (std::size_t r = first; r < max_rank; ++r) out.cmc[r] += 1.0;
  }
  if (out.valid) {
    for (auto& v : out.cmc) v /= static_cast<double>(out.valid);
    out.map /= static_cast<double>(out.valid);
  }
  return out;
}

RetrievalResult retrieve(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery,
                         std::size_t max_rank, std::size_t threads) {
  const auto dist = pairwise_distances(query.rows, gallery.rows, threads);
  return rank_from_distances(dist, query.identities, query.cameras, gallery.identities,
                             gallery.cameras, max_rank);
}

std::string report_json(const RetrievalResult& r, const std::string& split,
                        const std::string& checkpoint) {
  json j;
  j["checkpoint"] = checkpoint;
  j["split"] = split;
  j["rank1"] = r.rank1();
  j["map"] = r.map;
  j["cmc"] = r.cmc;
  j["valid_queries"] = r.valid;
  j["skipped_queries"] = r.skipped;
  return j.dump(2);
}

void export_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m) {
  save_mgt(path, m.rows);
  json side;
  side["identities"] = m.identities;
  side["cameras"] = m.cameras;
  auto side_path = path;
  side_path += ".json";
  std::ofstream os(side_path);
  if (!os) throw IoError("cannot write " + side_path.string());
  os << side.dump(1) << "\n";
}

std::array<double, semantics::kNumBodyParts> mask_iou(model::Model& model,
                                                      const data::SplitData& split,
                                                      std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("mask_iou: batch_size must be > 0");
  const auto& cfg = model.config();
  const std::size_t fh = cfg.feature_h(), fw = cfg.feature_w(), plane = fh * fw;
  std::array<double, semantics::kNumBodyParts> inter{}, uni{};
  for (std::size_t lo = 0; lo < split.size(); lo += batch_size) {
    const std::size_t hi = std::min(split.size(), lo + batch_size);
    const auto part = data::gather(split, range(lo, hi));
    const auto pred = model.predict_region_masks(part.images);
    const auto gt = semantics::resize_masks(part.masks, fh, fw);
    for (std::size_t b = 0; b < hi - lo; ++b)
      for (std::size_t k = 0; k < semantics::kNumBodyParts; ++k) {
        const std::size_t off = (b * semantics::kNumRegions + k) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const bool p = pred[off + i] > 0.5f, g = gt[off + i] > 0.5f;
          inter[k] += p && g;
          uni[k] += p || g;
        }
      }
  }
  std::array<double, semantics::kNumBodyParts> iou{};
  for (std::size_t k = 0; k < iou.size(); ++k) iou[k] = uni[k] > 0 ? inter[k] / uni[k] : 1.0;
  return iou;
}

double region_cosine(model::Model& model, const data::SplitData& batch) {
  if (!model.config().components.uses_regions())
    throw ContractError("region_cosine: model has no region branches");
  Tape<float> tape;
  auto fwd = model.forward(tape, batch.images, &batch.masks, {}, BnMode::kEval);
  // Double precision so a small stage-2 change is not lost to rounding.
  Tape<double> dt;
  std::vector<Var<double>> pooled;
  for (const auto& v : fwd.pooled) pooled.push_back(dt.constant(v.value().cast<double>()));
  return losses::sd_loss<double>(pooled, 1e-8).value().item();
}

}  // namespace magnifier::evalkit
