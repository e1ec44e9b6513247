#pragma once

#include <cstdint>
#include <random>

namespace neuroswap {

// splitmix64: cheap, well-mixed 64-bit hash used to derive independent
// sub-stream seeds from a master seed plus a chain of tags. Deriving seeds
// instead of sharing one generator keeps every pipeline stage reproducible
// independent of evaluation order or thread count.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed) { return splitmix64(seed); }

template <typename... Tags>
uint64_t derive_seed(uint64_t seed, uint64_t tag, Tags... rest) {
  return derive_seed(splitmix64(seed ^ splitmix64(tag)), rest...);
}

// Stream tags for the main pipeline stages.
enum : uint64_t {
  kStreamInit = 0x01,
  kStreamShuffle = 0x02,
  kStreamAugment = 0x03,
  kStreamWorld = 0x04,
  kStreamProbe = 0x05,
};

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed ^ 0xabcdef1234567890ULL)); }

template <typename... Tags>
Rng make_rng(uint64_t seed, Tags... tags) {
  return Rng(derive_seed(seed, static_cast<uint64_t>(tags)...));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {  // inclusive bounds
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

inline double gaussian(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

}  // namespace neuroswap
