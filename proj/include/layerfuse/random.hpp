#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace layerfuse {

/// SplitMix64 finalizer. Used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

/// FNV-1a over the bytes of `text`. Stable across platforms and runs.
std::uint64_t stable_hash(std::string_view text);

/// Deterministic random source.
///
/// Distributions are derived by hand from the raw 64-bit engine output so
/// that generated data and initial weights do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal (Box-Muller).
  double normal();

  /// Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace layerfuse
