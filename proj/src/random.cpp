#include "qsdlab/random.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace qsdlab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kParticleSalt = 0xD1B54A32D192ED03ULL;
constexpr std::uint64_t kStepSalt = 0xAEF17502108EF2D9ULL;
constexpr std::uint64_t kInitDomain = 0x494E4954ULL;  // "INIT"

// Adapter so std::poisson_distribution can consume a RandomSource.
struct BitsAdapter {
  using result_type = std::uint64_t;
  RandomSource* src;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return (std::uint64_t{1} << 53) - 1; }
  result_type operator()() { return static_cast<result_type>(src->uniform() * 9007199254740992.0); }
};

}  // namespace

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double RandomSource::normal() {
  // Box-Muller, one output per call so stream positions stay simple.
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RandomSource::poisson(double mean) {
  if (mean <= 0.0) return 0;
  if (mean < 30.0) {
    // Inversion by sequential search.
    double p = std::exp(-mean);
    double cdf = p;
    const double u = uniform();
    std::uint64_t k = 0;
    while (u > cdf && k < 10000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
      if (p == 0.0) break;
    }
    return k;
  }
  BitsAdapter g{this};
  std::poisson_distribution<std::uint64_t> dist(mean);
  return dist(g);
}

Stream Stream::for_particle(std::uint64_t seed, std::uint64_t particle, std::uint64_t step) {
  std::uint64_t k = mix64(seed + kGolden);
  k = mix64(k ^ (particle * kParticleSalt + 1));
  k = mix64(k ^ (step * kStepSalt + 2));
  return Stream(k);
}

Stream Stream::for_init(std::uint64_t seed, std::uint64_t particle) {
  return derive(seed, kInitDomain, particle);
}

Stream Stream::derive(std::uint64_t seed, std::uint64_t domain, std::uint64_t index) {
  std::uint64_t k = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  k = mix64(k ^ (domain * 0xBB67AE8584CAA73BULL + 3));
  k = mix64(k ^ (index * kParticleSalt + 5));
  return Stream(k);
}

std::uint64_t Stream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Stream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

}  // namespace qsdlab
