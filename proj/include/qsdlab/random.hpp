#pragma once

#include <cstdint>

namespace qsdlab {

/// Source of the three variates the simulation code needs. Models and the
/// resampling kernel draw through this interface so tests can script draws.
class RandomSource {
 public:
  virtual ~RandomSource() = default;

  /// Uniform on [0, 1).
  virtual double uniform() = 0;
  /// Standard normal.
  virtual double normal();
  /// Poisson with the given mean (mean >= 0).
  virtual std::uint64_t poisson(double mean);
};

/// Counter-based stream. The key is derived from (seed, particle, step), and
/// the k-th draw is a fixed bijective mix of (key, k), so every stream is
/// reproducible on its own regardless of how work is scheduled.
class Stream final : public RandomSource {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}

  static Stream for_particle(std::uint64_t seed, std::uint64_t particle, std::uint64_t step);
  /// Stream for the initial draw of a particle, disjoint from every step stream.
  static Stream for_init(std::uint64_t seed, std::uint64_t particle);
  /// Generic substream for auxiliary uses (projections, replicas, sweep points).
  static Stream derive(std::uint64_t seed, std::uint64_t domain, std::uint64_t index);

  std::uint64_t next_u64();
  double uniform() override;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z);

}  // namespace qsdlab
