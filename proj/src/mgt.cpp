#include "magnifier/mgt.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "magnifier/errors.hpp"

namespace magnifier {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'G', 'T', '1'};
constexpr std::uint8_t kDtypeF32 = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_mgt(std::ostream& os, const Tensor<float>& t) {
  if (t.rank() > 255) throw IoError("MGT1: rank exceeds 255");
  os.write(kMagic.data(), 4);
  os.put(static_cast<char>(kDtypeF32));
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) put_u64(os, d);
  std::vector<char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("MGT1: write failed");
}

Tensor<float> read_mgt(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kMagic) throw IoError("MGT1: bad magic");
  const int dtype = is.get();
  if (dtype != kDtypeF32) throw IoError("MGT1: unsupported dtype tag " + std::to_string(dtype));
  const int ndim = is.get();
  if (!is) throw IoError("MGT1: truncated header");
  Shape shape(static_cast<std::size_t>(ndim));
  for (auto& d : shape) d = get_u64(is);
  if (!is) throw IoError("MGT1: truncated dims");
  const std::size_t n = shape_size(shape);
  std::vector<unsigned char> buf(n * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!is) throw IoError("MGT1: truncated payload");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(buf[i * 4 + k]) << (8 * k);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

void save_mgt(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_mgt(os, t);
}

Tensor<float> load_mgt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_mgt(is);
}

}  // namespace magnifier
