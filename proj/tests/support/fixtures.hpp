#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "magnifier/data.hpp"

namespace magnifier::test {

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("magnifier_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// 8 identities x 4 images, generated once per test process.
inline const std::filesystem::path& small_dataset() {
  static const std::filesystem::path dir = [] {
    auto d = temp_dir("small_dataset");
    data::DatasetSpec spec;
    spec.num_ids = 8;
    spec.imgs_per_id = 4;
    data::generate_dataset(spec, d);
    return d;
  }();
  return dir;
}

}  // namespace magnifier::test
