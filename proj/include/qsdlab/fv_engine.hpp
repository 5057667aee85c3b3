#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "qsdlab/models.hpp"
#include "qsdlab/random.hpp"

namespace qsdlab {

/// Measure that can be sampled into a state buffer.
class SampleableMeasure {
 public:
  virtual ~SampleableMeasure() = default;
  virtual std::size_t dim() const = 0;
  virtual void sample(RandomSource& rng, std::span<double> out) const = 0;
};

class DiracMeasure final : public SampleableMeasure {
 public:
  explicit DiracMeasure(std::vector<double> point) : point_(std::move(point)) {}
  std::size_t dim() const override { return point_.size(); }
  void sample(RandomSource& rng, std::span<double> out) const override;

 private:
  std::vector<double> point_;
};

/// Uniform law on [0,1)^dim (torus) or (0,1)^dim (interval).
class UniformCubeMeasure final : public SampleableMeasure {
 public:
  explicit UniformCubeMeasure(std::size_t dim) : dim_(dim) {}
  std::size_t dim() const override { return dim_; }
  void sample(RandomSource& rng, std::span<double> out) const override;

 private:
  std::size_t dim_;
};

/// Law on state indices {0..n-1} of a finite chain.
class FiniteStateMeasure final : public SampleableMeasure {
 public:
  explicit FiniteStateMeasure(std::vector<double> weights);
  std::size_t dim() const override { return 1; }
  void sample(RandomSource& rng, std::span<double> out) const override;

 private:
  std::vector<double> cumulative_;
};

/// Uniform law over a fixed set of points. Points are stored in lexicographic
/// order, so the law and the draw for a given random stream do not depend on
/// the order in which the points were supplied.
class EmpiricalSource final : public SampleableMeasure {
 public:
  EmpiricalSource(std::size_t dim, std::span<const double> flat_points);
  std::size_t dim() const override { return dim_; }
  std::size_t size() const { return points_.size() / dim_; }
  void sample(RandomSource& rng, std::span<double> out) const override;

 private:
  std::size_t dim_;
  std::vector<double> points_;
};

/// FV run parameters.
struct FVConfig {
  std::size_t n_particles = 1024;
  double gamma = 0.01;
  std::size_t n_steps = 1000;
  std::size_t max_resurrection_iters = 1'000'000;
  std::uint64_t seed = 0;
  std::size_t snapshot_stride = 100;

  /// Throws InputError on invalid values or when gamma exceeds the model's
  /// declared validity range or differs from the model's step size.
  void validate(const KilledModel& model) const;
};

class ParticleEnsemble {
 public:
  ParticleEnsemble(std::size_t dim, std::vector<double> states, std::uint64_t seed);

  std::size_t size() const { return states_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> state(std::size_t i) const { return {states_.data() + i * dim_, dim_}; }
  std::span<double> state(std::size_t i) { return {states_.data() + i * dim_, dim_}; }
  const std::vector<double>& states() const { return states_; }

  std::size_t step_index = 0;
  std::size_t deaths_this_step = 0;
  std::uint64_t cumulative_deaths = 0;
  std::uint64_t seed = 0;

 private:
  std::size_t dim_;
  std::vector<double> states_;
};

/// One draw from Q_mu(x, .): propose from x; on death, redraw a start point
/// from `source`, propose from it, and repeat until a proposal survives.
/// Writes the result to `out`; `scratch` needs dim entries. Returns the
/// number of kill events, including the first one.
std::size_t q_mu_step(const KilledModel& model, std::span<const double> x,
                      const SampleableMeasure& source, RandomSource& rng, std::size_t max_iters,
                      std::span<double> out, std::span<double> scratch);

struct QMuDraw {
  std::vector<double> state;
  std::size_t deaths = 0;
};

QMuDraw q_mu_step(const KilledModel& model, std::span<const double> x,
                  const SampleableMeasure& source, RandomSource& rng, std::size_t max_iters);

/// Draws N i.i.d. initial states from `init` with per-particle init streams.
ParticleEnsemble initial_ensemble(const KilledModel& model, std::size_t n_particles,
                                  const SampleableMeasure& init, std::uint64_t seed);

/// One step of R_{gamma,N}. Every particle advances by Q_pi with pi the
/// pre-step empirical measure; particle i uses Stream::for_particle(seed, i, n).
/// OpenMP-parallel over particles; bitwise identical to fv_step_serial.
ParticleEnsemble fv_step(const KilledModel& model, const ParticleEnsemble& ensemble,
                         std::size_t max_iters = 1'000'000);

/// Single-threaded reference for fv_step.
ParticleEnsemble fv_step_serial(const KilledModel& model, const ParticleEnsemble& ensemble,
                                std::size_t max_iters = 1'000'000);

/// Serial step with caller-chosen streams (particle index, step index).
using StreamFactory = std::function<Stream(std::size_t particle, std::size_t step)>;
ParticleEnsemble fv_step_with_streams(const KilledModel& model, const ParticleEnsemble& ensemble,
                                      std::size_t max_iters, const StreamFactory& streams);

struct Snapshot {
  std::size_t step = 0;
  std::vector<double> states;
};

struct FVReport {
  std::string model_name;
  Geometry geometry = Geometry::torus;
  std::size_t dim = 1;
  FVConfig config;
  nlohmann::json model_info;  ///< preset parameters and hash, when known
  std::vector<std::uint64_t> deaths_per_step;
  std::vector<Snapshot> snapshots;
  double elapsed_seconds = 0.0;
};

/// Runs n_steps of the FV chain from N i.i.d. draws of `init`. Snapshots are
/// taken at step 0 and every snapshot_stride steps. Deterministic given
/// (seed, config, model) for any thread count.
FVReport run_fv(const KilledModel& model, const FVConfig& config, const SampleableMeasure& init);

/// Same, starting from a given ensemble (its seed is replaced by config.seed).
FVReport run_fv_from(const KilledModel& model, const FVConfig& config, ParticleEnsemble ensemble);

/// Run metadata and death counts; timing is left out (see write_report).
nlohmann::json report_to_json(const FVReport& report);

/// Writes report.json, report.meta.json (timing) and one snapshot_<step>.csv
/// per snapshot into `dir`.
void write_report(const FVReport& report, const std::filesystem::path& dir);

}  // namespace qsdlab
