#pragma once

#include <filesystem>
#include <iosfwd>

#include "magnifier/tensor.hpp"

namespace magnifier {

// MGT1 tensor files:
//   bytes 0-3  magic "MGT1"
//   byte  4    dtype tag (1 = f32)
//   byte  5    ndim
//   ndim x u64 little-endian dims
//   row-major little-endian f32 payload
void write_mgt(std::ostream& os, const Tensor<float>& t);
Tensor<float> read_mgt(std::istream& is);

void save_mgt(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> load_mgt(const std::filesystem::path& path);

}  // namespace magnifier
