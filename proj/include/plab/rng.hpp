#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace plab {

using Rng = std::mt19937_64;

// SplitMix64 finalizer, used only to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for the sub-stream identified by (seed, tags...). Order matters.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(seed);
  for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(derive_seed(seed, tags));
}

// Stream tags, so unrelated consumers of one seed never share draws.
namespace stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t random_noise = 4;
inline constexpr std::uint64_t friendly_init = 5;
inline constexpr std::uint64_t poison_select = 6;
inline constexpr std::uint64_t craft = 7;
inline constexpr std::uint64_t synth = 8;
inline constexpr std::uint64_t probe = 9;
inline constexpr std::uint64_t target = 10;
}  // namespace stream

}  // namespace plab
