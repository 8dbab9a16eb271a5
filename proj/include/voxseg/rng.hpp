#ifndef VOXSEG_RNG_HPP
#define VOXSEG_RNG_HPP

#include <cstdint>
#include <random>

namespace voxseg {

// Stream identifiers keep the sampling / augmentation / init RNGs independent
// of each other while all deriving from the one run seed.
enum class RngStream : uint64_t {
  ParamInit = 1,
  PatchSampling = 2,
  Augmentation = 3,
  Phantom = 4,
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based derivation: (seed, stream, counter) -> independent engine.
// Reconstructible at any iteration without replaying history.
inline std::mt19937_64 make_rng(uint64_t seed, RngStream stream, uint64_t counter = 0) {
  uint64_t s = splitmix64(seed ^ splitmix64(static_cast<uint64_t>(stream)));
  s = splitmix64(s ^ splitmix64(counter));
  return std::mt19937_64(s);
}

}  // namespace voxseg

#endif  // VOXSEG_RNG_HPP
