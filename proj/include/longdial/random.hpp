#pragma once

// Seeding contract and the random source shared by every corruption step.
//
//   dialogue seed = splitmix64_mix(fnv1a64(dialogue_id)) ^ global_seed
//   example seed  = splitmix64_mix(dialogue_seed + kGoldenGamma * (index + 1))
//
// The example seed is the (index+1)-th output of a SplitMix64 stream started
// at the dialogue seed. Each example then draws from one std::mt19937_64
// seeded with it. Distributions are implemented here rather than taken from
// <random> so that streams are bit-identical across standard libraries.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>

namespace longdial {

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = kFnvOffsetBasis;
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= kFnvPrime;
  }
  return h;
}

/// SplitMix64 output finalizer (no gamma increment).
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t global_seed,
                                    std::string_view dialogue_id) noexcept {
  return splitmix64_mix(fnv1a64(dialogue_id)) ^ global_seed;
}

constexpr std::uint64_t derive_example_seed(std::uint64_t dialogue_seed,
                                            std::uint64_t example_index) noexcept {
  return splitmix64_mix(dialogue_seed + kGoldenGamma * (example_index + 1));
}

/// What the noise functions need from a generator. Tests substitute
/// scripted sources to force specific draws.
template <class R>
concept RandomSource = requires(R& r, std::size_t n) {
  { r.uniform() } -> std::convertible_to<double>;
  { r.below(n) } -> std::convertible_to<std::size_t>;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Unbiased uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below requires n > 0");
    const std::uint64_t bound = n;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return static_cast<std::size_t>(r % bound);
    }
  }

 private:
  std::mt19937_64 engine_;
};

static_assert(RandomSource<Rng>);

/// Knuth's multiplication method: count uniforms until their running
/// product drops to e^-lambda. Exact, O(lambda) draws per sample.
template <RandomSource R>
std::size_t sample_poisson(double lambda, R& rng) {
  if (!(lambda > 0.0) || lambda > 700.0)
    throw std::domain_error("sample_poisson requires 0 < lambda <= 700");
  const double limit = std::exp(-lambda);
  std::size_t k = 0;
  double product = rng.uniform();
  while (product > limit) {
    ++k;
    product *= rng.uniform();
  }
  return k;
}

}  // namespace longdial
