#include "qsdlab/fv_engine.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"

namespace qsdlab {

void DiracMeasure::sample(RandomSource&, std::span<double> out) const {
  std::copy(point_.begin(), point_.end(), out.begin());
}

void UniformCubeMeasure::sample(RandomSource& rng, std::span<double> out) const {
  for (std::size_t k = 0; k < dim_; ++k) {
    double u = rng.uniform();
    while (u == 0.0) u = rng.uniform();
    out[k] = u;
  }
}

FiniteStateMeasure::FiniteStateMeasure(std::vector<double> weights) {
  if (weights.empty()) throw InputError("finite measure needs at least one state");
  double acc = 0.0;
  cumulative_.reserve(weights.size());
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("finite measure weights must be nonnegative");
    acc += w;
    cumulative_.push_back(acc);
  }
  if (!(acc > 0.0)) throw InputError("finite measure has zero mass");
  for (double& c : cumulative_) c /= acc;
  cumulative_.back() = 1.0;
}

void FiniteStateMeasure::sample(RandomSource& rng, std::span<double> out) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  const auto idx = std::min<std::ptrdiff_t>(it - cumulative_.begin(), cumulative_.size() - 1);
  out[0] = static_cast<double>(idx);
}

EmpiricalSource::EmpiricalSource(std::size_t dim, std::span<const double> flat_points) : dim_(dim) {
  if (dim == 0 || flat_points.empty() || flat_points.size() % dim != 0)
    throw InputError("empirical source needs a nonempty set of dim-sized points");
  const std::size_t n = flat_points.size() / dim;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(flat_points.begin() + a * dim, flat_points.begin() + (a + 1) * dim,
                                        flat_points.begin() + b * dim, flat_points.begin() + (b + 1) * dim);
  });
  points_.resize(flat_points.size());
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(flat_points.begin() + order[i] * dim, dim, points_.begin() + i * dim);
}

void EmpiricalSource::sample(RandomSource& rng, std::span<double> out) const {
  const std::size_t n = size();
  auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
  if (j >= n) j = n - 1;
  std::copy_n(points_.begin() + j * dim_, dim_, out.begin());
}

// ---------------------------------------------------------------------------

void FVConfig::validate(const KilledModel& model) const {
  if (n_particles < 1) throw InputError("N must be at least 1");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw InputError("gamma must be positive");
  if (gamma != model.step_size())
    throw InputError(fmt::format("config gamma {} differs from model step size {}", gamma, model.step_size()));
  if (const auto g0 = model.max_step_size(); g0 && gamma > *g0)
    throw InputError(fmt::format("gamma {} exceeds the model's validity range {}", gamma, *g0));
  if (max_resurrection_iters < 1) throw InputError("max_resurrection_iters must be at least 1");
  if (snapshot_stride < 1) throw InputError("snapshot_stride must be at least 1");
}

ParticleEnsemble::ParticleEnsemble(std::size_t dim, std::vector<double> states, std::uint64_t seed_)
    : seed(seed_), dim_(dim), states_(std::move(states)) {
  if (dim_ == 0 || states_.empty() || states_.size() % dim_ != 0)
    throw InputError("ensemble needs N >= 1 particles of dimension >= 1");
}

std::size_t q_mu_step(const KilledModel& model, std::span<const double> x,
                      const SampleableMeasure& source, RandomSource& rng, std::size_t max_iters,
                      std::span<double> out, std::span<double> scratch) {
  model.propose(x, out, rng);
  if (rng.uniform() >= model.kill_prob(out)) return 0;
  std::size_t deaths = 1;
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    source.sample(rng, scratch);
    model.propose(scratch, out, rng);
    if (rng.uniform() >= model.kill_prob(out)) return deaths;
    ++deaths;
  }
  throw ResurrectionOverflowError(max_iters, 0, 0);
}

QMuDraw q_mu_step(const KilledModel& model, std::span<const double> x,
                  const SampleableMeasure& source, RandomSource& rng, std::size_t max_iters) {
  QMuDraw d;
  d.state.resize(model.dim());
  std::vector<double> scratch(model.dim());
  d.deaths = q_mu_step(model, x, source, rng, max_iters, d.state, scratch);
  return d;
}

ParticleEnsemble initial_ensemble(const KilledModel& model, std::size_t n_particles,
                                  const SampleableMeasure& init, std::uint64_t seed) {
  if (n_particles < 1) throw InputError("N must be at least 1");
  if (init.dim() != model.dim()) throw InputError("initial measure dimension differs from the model's");
  const std::size_t dim = model.dim();
  std::vector<double> states(n_particles * dim);
  for (std::size_t i = 0; i < n_particles; ++i) {
    Stream s = Stream::for_init(seed, i);
    std::span<double> xi(states.data() + i * dim, dim);
    init.sample(s, xi);
    if (!model.in_state_space(xi))
      throw InputError(fmt::format("initial state of particle {} is outside the live state space", i));
  }
  return ParticleEnsemble(dim, std::move(states), seed);
}

namespace {

// Rethrows the failure of the lowest particle index, annotated with the step.
[[noreturn]] void rethrow_step_error(std::exception_ptr err, std::size_t particle, std::size_t step) {
  try {
    std::rethrow_exception(err);
  } catch (const ResurrectionOverflowError& e) {
    throw ResurrectionOverflowError(e.iterations(), particle, step);
  } catch (const ModelEvaluationError& e) {
    throw ModelEvaluationError(fmt::format("step {}, particle {}: {}", step, particle, e.what()));
  }
}

template <typename StreamFn>
void advance_particle(const KilledModel& model, const ParticleEnsemble& in, const EmpiricalSource& source,
                      std::size_t max_iters, std::size_t i, StreamFn&& stream_for, std::span<double> out,
                      std::span<double> scratch, std::size_t& deaths) {
  Stream rng = stream_for(i);
  deaths = q_mu_step(model, in.state(i), source, rng, max_iters, out, scratch);
}

ParticleEnsemble finish_step(const ParticleEnsemble& in, std::vector<double> next,
                             const std::vector<std::size_t>& deaths) {
  ParticleEnsemble out(in.dim(), std::move(next), in.seed);
  out.step_index = in.step_index + 1;
  out.deaths_this_step = std::accumulate(deaths.begin(), deaths.end(), std::size_t{0});
  out.cumulative_deaths = in.cumulative_deaths + out.deaths_this_step;
  return out;
}

ParticleEnsemble step_impl(const KilledModel& model, const ParticleEnsemble& in, std::size_t max_iters,
                           bool parallel) {
  const std::size_t n = in.size();
  const std::size_t dim = in.dim();
  const EmpiricalSource source(dim, in.states());
  std::vector<double> next(n * dim);
  std::vector<std::size_t> deaths(n, 0);
  std::vector<std::exception_ptr> errors(n);
  const auto seed = in.seed;
  const auto step = in.step_index;
  auto stream_for = [seed, step](std::size_t i) { return Stream::for_particle(seed, i, step); };

  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel if (parallel)
  {
    std::vector<double> scratch(dim);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      try {
        advance_particle(model, in, source, max_iters, i, stream_for, {next.data() + i * dim, dim}, scratch,
                         deaths[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (errors[i]) rethrow_step_error(errors[i], i, step);
  return finish_step(in, std::move(next), deaths);
}

}  // namespace

ParticleEnsemble fv_step(const KilledModel& model, const ParticleEnsemble& ensemble, std::size_t max_iters) {
  return step_impl(model, ensemble, max_iters, true);
}

ParticleEnsemble fv_step_serial(const KilledModel& model, const ParticleEnsemble& ensemble,
                                std::size_t max_iters) {
  return step_impl(model, ensemble, max_iters, false);
}

ParticleEnsemble fv_step_with_streams(const KilledModel& model, const ParticleEnsemble& in,
                                      std::size_t max_iters, const StreamFactory& streams) {
  const std::size_t n = in.size();
  const std::size_t dim = in.dim();
  const EmpiricalSource source(dim, in.states());
  std::vector<double> next(n * dim);
  std::vector<std::size_t> deaths(n, 0);
  std::vector<double> scratch(dim);
  const auto step = in.step_index;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      advance_particle(model, in, source, max_iters, i, [&](std::size_t p) { return streams(p, step); },
                       {next.data() + i * dim, dim}, scratch, deaths[i]);
    } catch (...) {
      rethrow_step_error(std::current_exception(), i, step);
    }
  }
  return finish_step(in, std::move(next), deaths);
}

FVReport run_fv(const KilledModel& model, const FVConfig& config, const SampleableMeasure& init) {
  config.validate(model);
  return run_fv_from(model, config, initial_ensemble(model, config.n_particles, init, config.seed));
}

FVReport run_fv_from(const KilledModel& model, const FVConfig& config, ParticleEnsemble ensemble) {
  config.validate(model);
  if (ensemble.size() != config.n_particles) throw InputError("ensemble size differs from config N");
  if (ensemble.dim() != model.dim()) throw InputError("ensemble dimension differs from the model's");
  const auto t0 = std::chrono::steady_clock::now();
  ensemble.seed = config.seed;
  ensemble.step_index = 0;
  ensemble.deaths_this_step = 0;
  ensemble.cumulative_deaths = 0;

  FVReport report;
  report.model_name = model.name();
  report.geometry = model.geometry();
  report.dim = model.dim();
  report.config = config;
  report.deaths_per_step.reserve(config.n_steps);
  report.snapshots.push_back({0, ensemble.states()});
  for (std::size_t k = 0; k < config.n_steps; ++k) {
    ensemble = fv_step(model, ensemble, config.max_resurrection_iters);
    report.deaths_per_step.push_back(ensemble.deaths_this_step);
    if (ensemble.step_index % config.snapshot_stride == 0)
      report.snapshots.push_back({ensemble.step_index, ensemble.states()});
  }
  report.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

nlohmann::json report_to_json(const FVReport& r) {
  nlohmann::json j;
  j["schema"] = "qsdlab.fv_report.v1";
  j["model"] = r.model_name;
  j["geometry"] = to_string(r.geometry);
  j["dim"] = r.dim;
  if (!r.model_info.is_null()) j["model_info"] = r.model_info;
  j["config"] = {{"N", r.config.n_particles},
                 {"gamma", r.config.gamma},
                 {"n_steps", r.config.n_steps},
                 {"max_resurrection_iters", r.config.max_resurrection_iters},
                 {"seed", r.config.seed},
                 {"snapshot_stride", r.config.snapshot_stride}};
  j["deaths_per_step"] = r.deaths_per_step;
  std::uint64_t total = 0;
  for (auto d : r.deaths_per_step) total += d;
  j["total_deaths"] = total;
  auto steps = nlohmann::json::array();
  for (const auto& s : r.snapshots) steps.push_back(s.step);
  j["snapshot_steps"] = steps;
  return j;
}

void write_report(const FVReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  auto open = [](const std::filesystem::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError(fmt::format("cannot write {}", p.string()));
    return f;
  };
  {
    auto f = open(dir / "report.json");
    f << report_to_json(r).dump(2) << '\n';
  }
  {
    auto f = open(dir / "report.meta.json");
    f << nlohmann::json{{"elapsed_seconds", r.elapsed_seconds}}.dump(2) << '\n';
  }
  for (const auto& s : r.snapshots) {
    auto f = open(dir / fmt::format("snapshot_{:08d}.csv", s.step));
    f << "particle";
    for (std::size_t k = 0; k < r.dim; ++k) f << ",x" << k;
    f << '\n';
    const std::size_t n = s.states.size() / r.dim;
    for (std::size_t i = 0; i < n; ++i) {
      f << i;
      for (std::size_t k = 0; k < r.dim; ++k) f << ',' << fmt::format("{}", s.states[i * r.dim + k]);
      f << '\n';
    }
    if (!f) throw IoError(fmt::format("write failed in {}", dir.string()));
  }
}

}  // namespace qsdlab
