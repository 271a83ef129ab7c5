#pragma once

#include <cstdint>
#include <limits>

namespace dsa {

/**
 * SplitMix64 engine. Satisfies UniformRandomBitGenerator so it plugs into the
 * <random> distributions. Seeding is O(1), which lets every (seed, replica,
 * purpose, iteration) tuple own an independent short-lived stream.
 */
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  constexpr explicit SplitMix64(std::uint64_t seed = 0) noexcept
      : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 bits of resolution.
  constexpr double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

using Rng = SplitMix64;

/// Stream purposes. Distinct tags keep the gossip draw independent of the
/// observation noise given the past.
enum class StreamTag : std::uint64_t {
  kGossip = 0x676f73736970ULL,
  kNoise = 0x6e6f697365ULL,
  kChannel = 0x6368616e6eULL,
  kInitial = 0x696e6974ULL,
  kObjective = 0x6f626aULL,
  kGradient = 0x67726164ULL,
};

namespace detail {
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
  z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
  return z ^ (z >> 33);
}
}  // namespace detail

/// Hash (seed, replica, tag, counter) into a stream seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t replica,
                                    StreamTag tag,
                                    std::uint64_t counter = 0) noexcept {
  std::uint64_t h = detail::mix64(seed ^ 0x5851f42d4c957f2dULL);
  h = detail::mix64(h ^ (replica + 0x9e3779b97f4a7c15ULL));
  h = detail::mix64(h ^ static_cast<std::uint64_t>(tag));
  h = detail::mix64(h ^ (counter * 0xd1342543de82ef95ULL + 1));
  return h;
}

constexpr Rng make_stream(std::uint64_t seed, std::uint64_t replica,
                          StreamTag tag, std::uint64_t counter = 0) noexcept {
  return Rng(derive_seed(seed, replica, tag, counter));
}

}  // namespace dsa
