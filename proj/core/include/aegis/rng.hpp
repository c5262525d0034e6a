#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace aegis {

/// SplitMix64 generator (Steele, Lea & Flood 2014).
///
/// Every draw is produced by arithmetic defined here rather than by
/// <random> distributions, whose output is implementation-defined, so a
/// seed reproduces the same stream on any conforming platform.
///
///   next:     state += 0x9E3779B97F4A7C15; z = mix(state)
///   split(i): child seed = mix(state ^ mix(i + 0x632BE59BD9B4E019))
///   uniform:  (next >> 11) * 2^-53
///   below(n): rejection sampling on the top of the 64-bit range
///   normal:   Box-Muller, cosine branch, one value per two uniforms
class Rng {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x41454749;  // "AEGI"

  explicit Rng(std::uint64_t seed = kDefaultSeed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Derives an independent stream; does not advance this generator.
  [[nodiscard]] Rng split(std::uint64_t stream) const;

  std::uint64_t state() const { return state_; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t z);

/// 0..n-1 in seeded shuffled order.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace aegis
