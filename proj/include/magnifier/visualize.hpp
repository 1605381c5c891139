#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "magnifier/model.hpp"
#include "magnifier/tensor.hpp"

namespace magnifier::visualize {

struct Gray {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// Channel mean of |features| ([C,h,w]), bilinearly upscaled to out_h x out_w,
// then min-max scaled to [0,255]. A constant map becomes uniform 128.
Gray saliency(const Tensor<float>& features, std::size_t out_h, std::size_t out_w);

// Binary PGM (P5, maxval 255).
void write_pgm(const std::filesystem::path& path, const Gray& image);
Gray read_pgm(const std::filesystem::path& path);

// One PGM per image: <out_dir>/<tag>_<index>.pgm. images is [N,3,H,W].
std::vector<std::filesystem::path> export_saliency(model::Model& model, const Tensor<float>& images,
                                                   const std::filesystem::path& out_dir,
                                                   const std::string& tag);

}  // namespace magnifier::visualize
