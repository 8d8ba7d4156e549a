#pragma once

#include <cstdint>

namespace gsocc {

/// Stateless counter-based generator: every (seed, stream, index) triple maps
/// to a fixed 64-bit value, so parallel and serial consumers see identical
/// draws regardless of evaluation order.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  [[nodiscard]] constexpr std::uint64_t bits(std::uint64_t index) const noexcept {
    return mix(key_ + mix(index * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  [[nodiscard]] constexpr double uniform(std::uint64_t index) const noexcept {
    return static_cast<double>(bits(index) >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). n must be positive.
  [[nodiscard]] constexpr std::uint64_t below(std::uint64_t index, std::uint64_t n) const noexcept {
    // Multiply-shift keeps the bias below 2^-64 * n.
    const unsigned __int128 wide = static_cast<unsigned __int128>(bits(index)) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

  /// Derive an independent generator for a sub-stream.
  [[nodiscard]] constexpr CounterRng substream(std::uint64_t stream) const noexcept {
    CounterRng r(0);
    r.key_ = mix(key_ ^ mix(stream + 0xd1b54a32d192ed03ULL));
    return r;
  }

 private:
  // SplitMix64 finalizer.
  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
};

}  // namespace gsocc
