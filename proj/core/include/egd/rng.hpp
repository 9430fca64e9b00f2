#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "egd/tensor.hpp"

namespace egd {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return splitmix64(splitmix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

// Standard-normal draws, reproducible from (seed, stream, shape).
struct GaussianSample {
  Tensor epsilon;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  static GaussianSample draw(std::uint64_t seed, std::uint64_t stream, std::vector<std::size_t> shape);
  static GaussianSample zeros(std::vector<std::size_t> shape);
};

// Uniform shuffle driven by our own index draws so the permutation does not
// depend on the standard library's shuffle implementation.
template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace egd
