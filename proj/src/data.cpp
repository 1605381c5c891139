#include "magnifier/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "magnifier/errors.hpp"
#include "magnifier/mgt.hpp"

namespace magnifier::data {

namespace fs = std::filesystem;
using json = nlohmann::json;
namespace sem = semantics;

namespace {

constexpr std::size_t kFamilySize = 4;

const std::array<std::array<float, 3>, 12> kPalette{{
    {0.85f, 0.15f, 0.15f},
    {0.15f, 0.75f, 0.20f},
    {0.15f, 0.30f, 0.90f},
    {0.90f, 0.85f, 0.20f},
    {0.80f, 0.20f, 0.80f},
    {0.20f, 0.80f, 0.85f},
    {0.95f, 0.55f, 0.10f},
    {0.92f, 0.92f, 0.92f},
    {0.45f, 0.20f, 0.65f},
    {0.55f, 0.35f, 0.20f},
    {0.95f, 0.60f, 0.70f},
    {0.50f, 0.55f, 0.15f},
}};

struct CellRect {
  std::size_t r0, r1, c0, c1;  // inclusive cell bounds, relative to the body anchor
};

// Canonical pose in cells: head on top, chest below, arms beside, legs and feet below.
const std::array<std::vector<CellRect>, sem::kNumBodyParts>& layout() {
  static const std::array<std::vector<CellRect>, sem::kNumBodyParts> rects{{
      {{0, 1, 3, 4}},                  // head
      {{2, 6, 2, 5}},                  // chest
      {{2, 4, 1, 1}, {2, 4, 6, 6}},    // upper arms
      {{5, 7, 1, 1}, {5, 7, 6, 6}},    // lower arms
      {{7, 9, 2, 5}},                  // upper legs
      {{10, 12, 2, 5}},                // lower legs
      {{13, 13, 2, 5}},                // feet
  }};
  return rects;
}

// Part-type texture, shared by all identities; the mask head keys on it.
float pattern(std::size_t part, std::size_t y, std::size_t x) {
  switch (part) {
    case sem::kHead: return (x / 2) % 2 ? 1.f : 0.f;
    case sem::kChest: return (y / 2) % 2 ? 1.f : 0.f;
    case sem::kUpperArm: return x % 2 ? 1.f : 0.f;
    case sem::kLowerArm: return (x + y) % 2 ? 1.f : 0.f;
    case sem::kUpperLeg: return ((x + y) / 2) % 2 ? 1.f : 0.f;
    case sem::kLowerLeg: return y % 2 ? 1.f : 0.f;
    case sem::kFoot: return ((x / 2) + (y / 2)) % 2 ? 1.f : 0.f;
    default: return 0.f;
  }
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

std::string file_name(const char* prefix, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu.mgt", prefix, index);
  return buf;
}

json record_to_json(const Record& r) {
  json j{{"image", r.image}, {"mask", r.mask},     {"identity", r.identity},
         {"label", r.label}, {"camera", r.camera}};
  if (!r.occluded_parts.empty()) j["occluded_parts"] = r.occluded_parts;
  return j;
}

Record record_from_json(const json& j) {
  Record r;
  r.image = j.at("image").get<std::string>();
  r.mask = j.at("mask").get<std::string>();
  r.identity = j.at("identity").get<std::size_t>();
  r.label = j.at("label").get<std::size_t>();
  r.camera = j.at("camera").get<std::size_t>();
  if (j.contains("occluded_parts"))
    r.occluded_parts = j.at("occluded_parts").get<std::vector<std::size_t>>();
  return r;
}

}  // namespace

void DatasetSpec::validate() const {
  if (num_ids < 4) throw ConfigError("dataset: num_ids must be at least 4 to split train/test");
  if (imgs_per_id < 4) throw ConfigError("dataset: imgs_per_id must be at least 4");
  if (!(occlusion_rate >= 0.0 && occlusion_rate <= 1.0))
    throw ConfigError("dataset: occlusion_rate must lie in [0, 1]");
  if (height != 16 * kCell || width != 8 * kCell)
    throw ConfigError("dataset: only 64x32 images are supported");
}

std::size_t appearance_distance(const SyntheticIdentity& a, const SyntheticIdentity& b) {
  std::size_t d = 0;
  for (std::size_t k = 0; k < sem::kNumBodyParts; ++k)
    if (a.parts[k].color != b.parts[k].color || a.parts[k].texture_amp != b.parts[k].texture_amp)
      ++d;
  return d;
}

std::vector<SyntheticIdentity> make_identities(std::uint64_t seed, std::size_t num_ids) {
  RngStream rng(RngStream::derive(seed, "identities"));
  std::vector<SyntheticIdentity> out;
  std::vector<std::size_t> family;
  std::size_t attempts = 0;
  while (out.size() < num_ids) {
    if (out.size() % kFamilySize == 0) {
      family = rng.subset(kPalette.size(), sem::kNumBodyParts);
    }
    SyntheticIdentity cand;
    cand.id = out.size();
    auto colors = family;
    rng.shuffle(colors.begin(), colors.end());
    for (std::size_t k = 0; k < sem::kNumBodyParts; ++k) {
      cand.parts[k].color = kPalette[colors[k]];
      cand.parts[k].texture_amp = rng.uniform() < 0.5 ? 0.6f : 0.75f;
    }
    const bool distinct = std::all_of(out.begin(), out.end(), [&](const SyntheticIdentity& o) {
      return appearance_distance(o, cand) >= 2;
    });
    if (distinct) {
      out.push_back(cand);
    } else if (++attempts > 100000) {
      throw ConfigError("dataset: could not draw enough distinct identities");
    }
  }
  return out;
}

Sample render_sample(const SyntheticIdentity& who, std::size_t camera, std::size_t height,
                     std::size_t width, RngStream& rng) {
  Sample s;
  s.identity = who.id;
  s.camera = camera;
  s.image = Tensor<float>(Shape{3, height, width});
  s.masks = Tensor<float>(Shape{sem::kNumRegions, height, width});
  const std::size_t plane = height * width;

  // Whole-body jitter in cells keeps part edges on the cell grid.
  const std::size_t dy = rng.below(2);
  const long dx = static_cast<long>(rng.below(3)) - 1;
  std::vector<int> label(plane, -1);
  for (std::size_t k = 0; k < sem::kNumBodyParts; ++k)
    for (const auto& r : layout()[k])
      for (std::size_t cy = r.r0 + dy; cy <= r.r1 + dy; ++cy)
        for (std::size_t cx0 = r.c0; cx0 <= r.c1; ++cx0) {
          const long cx = static_cast<long>(cx0) + dx;
          for (std::size_t y = cy * kCell; y < (cy + 1) * kCell; ++y)
            for (std::size_t x = cx * kCell; x < (cx + 1) * kCell; ++x)
              label[y * width + x] = static_cast<int>(k);
        }

  // Camera profiles: 0 bright and clean, 1 dim, noisier, with a blue cast.
  const double bright = camera == 0 ? rng.uniform(0.9, 1.1) : rng.uniform(0.65, 0.85);
  const double noise = camera == 0 ? 0.02 : 0.06;
  const std::array<double, 3> cast = camera == 0 ? std::array<double, 3>{0, 0, 0}
                                                 : std::array<double, 3>{0.0, 0.0, 0.05};
  const double bg_level = rng.uniform(0.2, 0.5);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = bg_level + rng.uniform(-0.05, 0.05);

  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t p = y * width + x;
      const int k = label[p];
      for (std::size_t c = 0; c < 3; ++c) {
        double v = bg[c];
        if (k >= 0) {
          const auto& part = who.parts[static_cast<std::size_t>(k)];
          v = part.color[c] * (1.0 - part.texture_amp * pattern(static_cast<std::size_t>(k), y, x));
        }
        s.image[c * plane + p] = clamp01(v * bright + cast[c] + noise * rng.normal());
      }
      if (k >= 0) s.masks[static_cast<std::size_t>(k) * plane + p] = 1.f;
      s.masks[sem::kBackground * plane + p] = 1.f;
    }
  return s;
}

Tensor<float> occlude(const Tensor<float>& image, const Tensor<float>& masks,
                      const std::vector<std::size_t>& parts) {
  require_rank(image.shape(), 3, "occlude image");
  require_rank(masks.shape(), 3, "occlude masks");
  const std::size_t plane = image.dim(1) * image.dim(2);
  Tensor<float> out = image;
  for (auto k : parts) {
    if (k >= sem::kNumBodyParts) throw IndexError("occlude: part index out of range");
    for (std::size_t p = 0; p < plane; ++p)
      if (masks[k * plane + p] > 0.5f)
        for (std::size_t c = 0; c < image.dim(0); ++c) out[c * plane + p] = 0.f;
  }
  return out;
}

const std::vector<Record>& Manifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "query") return query;
  if (name == "gallery") return gallery;
  if (name == "occluded") return occluded;
  throw ConfigError("unknown split '" + name + "' (expected train|query|gallery|occluded)");
}

std::string Manifest::to_json() const {
  json j;
  j["format"] = "magnifier-dataset-1";
  j["seed"] = spec.seed;
  j["num_ids"] = spec.num_ids;
  j["imgs_per_id"] = spec.imgs_per_id;
  j["occlusion_rate"] = spec.occlusion_rate;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["num_train_ids"] = num_train_ids;
  std::vector<std::string> names(sem::region_names().begin(), sem::region_names().end());
  j["regions"] = names;
  for (const auto& [key, list] : {std::pair<const char*, const std::vector<Record>*>{"train", &train},
                                  {"query", &query},
                                  {"gallery", &gallery},
                                  {"occluded", &occluded}}) {
    json arr = json::array();
    for (const auto& r : *list) arr.push_back(record_to_json(r));
    j[key] = std::move(arr);
  }
  return j.dump(1);
}

Manifest Manifest::from_json(const std::string& text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    m.spec.seed = j.at("seed").get<std::uint64_t>();
    m.spec.num_ids = j.at("num_ids").get<std::size_t>();
    m.spec.imgs_per_id = j.at("imgs_per_id").get<std::size_t>();
    m.spec.occlusion_rate = j.at("occlusion_rate").get<double>();
    m.spec.height = j.at("height").get<std::size_t>();
    m.spec.width = j.at("width").get<std::size_t>();
    m.num_train_ids = j.at("num_train_ids").get<std::size_t>();
    for (const auto& r : j.at("train")) m.train.push_back(record_from_json(r));
    for (const auto& r : j.at("query")) m.query.push_back(record_from_json(r));
    for (const auto& r : j.at("gallery")) m.gallery.push_back(record_from_json(r));
    for (const auto& r : j.at("occluded")) m.occluded.push_back(record_from_json(r));
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: ") + e.what());
  }
  return m;
}

Manifest generate_dataset(const DatasetSpec& spec, const fs::path& out) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "masks", ec);
  if (ec) throw IoError("gen-data: cannot create " + out.string() + ": " + ec.message());

  const auto people = make_identities(spec.seed, spec.num_ids);
  Manifest m;
  m.spec = spec;
  m.num_train_ids = spec.num_ids / 2;
  const std::size_t half = spec.imgs_per_id / 2;

  for (std::size_t id = 0; id < spec.num_ids; ++id) {
    const bool is_train = id < m.num_train_ids;
    for (std::size_t j = 0; j < spec.imgs_per_id; ++j) {
      const std::size_t index = id * spec.imgs_per_id + j;
      RngStream rng(RngStream::derive(spec.seed, "sample", index));
      const Sample s = render_sample(people[id], j % 2, spec.height, spec.width, rng);
      Record r{"images/" + file_name("", index), "masks/" + file_name("", index), id,
               is_train ? id : id - m.num_train_ids, s.camera, {}};
      save_mgt(out / r.image, s.image);
      save_mgt(out / r.mask, s.masks);
      if (is_train) {
        m.train.push_back(r);
        continue;
      }
      if (j >= half) {
        m.gallery.push_back(r);
        continue;
      }
      m.query.push_back(r);
      RngStream occ(RngStream::derive(spec.seed, "occlude", index));
      Record o = r;
      if (occ.uniform() < spec.occlusion_rate) {
        const std::size_t count = 1 + occ.below(3);
        o.occluded_parts = occ.subset(sem::kNumBodyParts, count);
        o.image = "images/" + file_name("occ_", index);
        save_mgt(out / o.image, occlude(s.image, s.masks, o.occluded_parts));
      }
      m.occluded.push_back(o);
    }
  }

  std::ofstream os(out / "manifest.json", std::ios::binary);
  os << m.to_json() << '\n';
  if (!os) throw IoError("gen-data: cannot write manifest in " + out.string());
  return m;
}

Manifest load_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json", std::ios::binary);
  if (!is) throw IoError("cannot open " + (dir / "manifest.json").string());
  std::stringstream ss;
  ss << is.rdbuf();
  return Manifest::from_json(ss.str());
}

SplitData load_split(const fs::path& dir, const Manifest& manifest, const std::string& name) {
  const auto& records = manifest.split(name);
  SplitData out;
  const std::size_t h = manifest.spec.height, w = manifest.spec.width;
  const std::size_t n = records.size();
  if (n == 0) throw ConfigError("split '" + name + "' is empty");
  out.images = Tensor<float>(Shape{n, 3, h, w});
  out.masks = Tensor<float>(Shape{n, sem::kNumRegions, h, w});
  const std::size_t isz = 3 * h * w, msz = sem::kNumRegions * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = load_mgt(dir / records[i].image);
    const auto msk = load_mgt(dir / records[i].mask);
    if (img.size() != isz || msk.size() != msz)
      throw IoError("split '" + name + "': unexpected tensor shape in " + records[i].image);
    std::copy(img.storage().begin(), img.storage().end(), out.images.storage().begin() + i * isz);
    std::copy(msk.storage().begin(), msk.storage().end(), out.masks.storage().begin() + i * msz);
    out.identities.push_back(records[i].identity);
    out.labels.push_back(records[i].label);
    out.cameras.push_back(records[i].camera);
  }
  return out;
}

SplitData gather(const SplitData& split, const std::vector<std::size_t>& indices) {
  SplitData out;
  const auto is = split.images.shape();
  const auto ms = split.masks.shape();
  const std::size_t isz = split.images.size() / is[0], msz = split.masks.size() / ms[0];
  out.images = Tensor<float>(Shape{indices.size(), is[1], is[2], is[3]});
  out.masks = Tensor<float>(Shape{indices.size(), ms[1], ms[2], ms[3]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= split.size()) throw IndexError("gather: index out of range");
    std::copy_n(split.images.storage().begin() + src * isz, isz,
                out.images.storage().begin() + i * isz);
    std::copy_n(split.masks.storage().begin() + src * msz, msz,
                out.masks.storage().begin() + i * msz);
    out.identities.push_back(split.identities[src]);
    out.labels.push_back(split.labels[src]);
    out.cameras.push_back(split.cameras[src]);
  }
  return out;
}

std::size_t batches_per_epoch(std::size_t num_ids, std::size_t num_images, std::size_t p,
                              std::size_t q) {
  const std::size_t cover = (num_ids + p - 1) / p;
  const auto by_images =
      static_cast<std::size_t>(std::llround(static_cast<double>(num_images) / (p * q)));
  return std::max(cover, by_images);
}

std::vector<std::vector<std::size_t>> pk_batch_sampler(const std::vector<std::size_t>& labels,
                                                       std::size_t p, std::size_t q,
                                                       std::size_t num_batches, RngStream& rng) {
  if (p < 2 || q < 2) throw ConfigError("pk_batch_sampler: P and Q must both be at least 2");
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  if (by_id.size() < p)
    throw ConfigError("pk_batch_sampler: P = " + std::to_string(p) + " exceeds the " +
                      std::to_string(by_id.size()) + " available identities");
  std::vector<std::size_t> order;
  for (const auto& kv : by_id) order.push_back(kv.first);
  rng.shuffle(order.begin(), order.end());
  std::size_t pos = 0;

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < num_batches; ++b) {
    std::vector<std::size_t> chosen;
    while (chosen.size() < p) {
      if (pos == order.size()) {
        rng.shuffle(order.begin(), order.end());
        pos = 0;
      }
      const std::size_t id = order[pos++];
      if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) chosen.push_back(id);
    }
    std::vector<std::size_t> batch;
    for (auto id : chosen) {
      const auto& pool = by_id[id];
      if (pool.size() >= q) {
        for (auto k : rng.subset(pool.size(), q)) batch.push_back(pool[k]);
      } else {
        for (std::size_t k = 0; k < q; ++k) batch.push_back(pool[rng.below(pool.size())]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace magnifier::data
