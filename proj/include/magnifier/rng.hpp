#pragma once

#include <algorithm>
#include <cstdint>
#include <string_view>
#include <vector>

namespace magnifier {

// Counter-based generator. The n-th output (n = 1, 2, ...) is the SplitMix64
// finalizer applied to seed + n * 0x9E3779B97F4A7C15, so a stream is fully
// described by (seed, counter) and can be repositioned or replayed exactly.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller; consumes two outputs per call.
  double normal() noexcept;

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

  // Uniformly random k-subset of [0, n), returned in ascending order.
  std::vector<std::size_t> subset(std::size_t n, std::size_t k);

  // Seed for an independent child stream identified by (tag, index).
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag,
                              std::uint64_t index = 0) noexcept;

  static std::uint64_t mix(std::uint64_t z) noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace magnifier
