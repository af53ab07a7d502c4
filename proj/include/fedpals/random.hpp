#pragma once

#include <cstdint>
#include <random>

namespace fedpals {

// splitmix64 finalizer; decorrelates nearby integer seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent substream id from a master seed and integer tags.
// The fold is order-sensitive: derive_seed(s, a, b) != derive_seed(s, b, a).
template <class... Tags>
std::uint64_t derive_seed(std::uint64_t master, Tags... tags) {
  std::uint64_t s = splitmix64(master);
  ((s = splitmix64(s ^ (0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(tags)))), ...);
  return s;
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64(splitmix64(seed));
}

}  // namespace fedpals
