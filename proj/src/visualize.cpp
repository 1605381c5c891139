#include "magnifier/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "magnifier/errors.hpp"
#include "magnifier/ops.hpp"

namespace magnifier::visualize {

namespace fs = std::filesystem;

Gray saliency(const Tensor<float>& features, std::size_t out_h, std::size_t out_w) {
  require_rank(features.shape(), 3, "saliency features");
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2);
  Tensor<float> mean(Shape{1, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) mean[i] += std::fabs(features[ch * h * w + i]);
  for (auto& v : mean.storage()) v /= static_cast<float>(c);
  const auto up = bilinear_resize(mean, out_h, out_w);

  Gray g{out_h, out_w, std::vector<std::uint8_t>(out_h * out_w, 128)};
  const auto [lo, hi] = std::minmax_element(up.storage().begin(), up.storage().end());
  const float mn = *lo, mx = *hi;
  if (!(mx > mn)) return g;
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const double t = (up[i] - mn) / static_cast<double>(mx - mn);
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  return g;
}

void write_pgm(const fs::path& path, const Gray& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << image.width << " " << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Gray read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t maxval = 0;
  Gray g;
  is >> magic >> g.width >> g.height >> maxval;
  if (!is || magic != "P5" || maxval != 255) throw IoError(path.string() + ": not an 8-bit P5 PGM");
  is.get();  // single whitespace before the raster
  g.pixels.resize(g.width * g.height);
  is.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (!is) throw IoError(path.string() + ": truncated raster");
  return g;
}

std::vector<fs::path> export_saliency(model::Model& model, const Tensor<float>& images,
                                      const fs::path& out_dir, const std::string& tag) {
  require_rank(images.shape(), 4, "export_saliency images");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto feats = model.feature_map(images);
  const std::size_t n = feats.dim(0), c = feats.dim(1), h = feats.dim(2), w = feats.dim(3);
  const std::size_t H = images.dim(2), W = images.dim(3);
  std::vector<fs::path> out;
  for (std::size_t b = 0; b < n; ++b) {
    const auto first = feats.storage().begin() + b * c * h * w;
    Tensor<float> one(Shape{c, h, w}, std::vector<float>(first, first + c * h * w));
    char name[32];
    std::snprintf(name, sizeof name, "_%03zu.pgm", b);
    out.push_back(out_dir / (tag + name));
    write_pgm(out.back(), saliency(one, H, W));
  }
  return out;
}

}  // namespace magnifier::visualize
