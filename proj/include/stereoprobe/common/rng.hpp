#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "stereoprobe/common/hash.hpp"

namespace stereoprobe {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// All randomness in a run flows from one seed through named sub-streams
// ("dataset", "probe", "shapley", ...), optionally indexed (e.g. by
// permutation number) so parallel workers draw independent, reproducible
// sequences.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a(stream)) + index);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view stream,
                    std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

// Uniform double in [0, 1) from the top 53 bits; identical on every platform,
// unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

// Fisher-Yates with uniform_index, so shuffles are portable across
// standard library implementations.
template <typename Range>
void portable_shuffle(Range& range, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(std::size(range));
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    using std::swap;
    swap(range[i - 1], range[j]);
  }
}

}  // namespace stereoprobe
