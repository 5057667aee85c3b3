#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "qsdlab/errors.hpp"
#include "qsdlab/fv_engine.hpp"
#include "qsdlab/models.hpp"

using namespace qsdlab;

namespace {

// Kills every proposal.
class Doomed final : public KilledModel {
 public:
  Doomed() : KilledModel(0.1) {}
  std::string name() const override { return "doomed"; }
  Geometry geometry() const override { return Geometry::torus; }
  std::size_t dim() const override { return 1; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource&) const override { out[0] = x[0]; }
  double kill_prob(std::span<const double>) const override { return 1.0; }
  bool in_state_space(std::span<const double>) const override { return true; }
};

// Exact one-step law of Q_mu for two_point from the 2x2 semigroup:
// Q_mu(x, .) = S(x, .) + D(x) S_mu / (1 - D_mu).
std::array<double, 2> q_mu_law(double a, double b, double g, int x, std::array<double, 2> mu) {
  const double e_a = std::exp(-a * g), e_b = std::exp(-b * g);
  const double S[2][2] = {{e_b, 0.0}, {a * (e_a - e_b) / (b - a), e_a}};
  const double D[2] = {1 - S[0][0] - S[0][1], 1 - S[1][0] - S[1][1]};
  std::array<double, 2> smu{mu[0] * S[0][0] + mu[1] * S[1][0], mu[0] * S[0][1] + mu[1] * S[1][1]};
  const double dmu = mu[0] * D[0] + mu[1] * D[1];
  return {S[x][0] + D[x] * smu[0] / (1 - dmu), S[x][1] + D[x] * smu[1] / (1 - dmu)};
}

}  // namespace

TEST_CASE("OpenMP step is bitwise equal to the serial reference at any thread count") {
  auto model = make_model(presets::TorusDiffusion{2, 1.0, 1.0, 0.8}, 0.05);
  const UniformCubeMeasure init(2);
  auto ens = initial_ensemble(*model, 777, init, 9);
  for (int step = 0; step < 5; ++step) {
    const auto ref = fv_step_serial(*model, ens);
    for (int threads : {1, 2, 4}) {
      omp_set_num_threads(threads);
      const auto par = fv_step(*model, ens);
      CHECK(par.states() == ref.states());
      CHECK(par.deaths_this_step == ref.deaths_this_step);
    }
    ens = ref;
  }
}

TEST_CASE("run_fv is deterministic given the seed") {
  auto model = make_model(presets::HouseOfCard{1.0, 1.0}, 0.05);
  const UniformCubeMeasure init(1);
  FVConfig cfg;
  cfg.gamma = 0.05;
  cfg.n_particles = 300;
  cfg.n_steps = 40;
  cfg.snapshot_stride = 10;
  cfg.seed = 17;
  const auto r1 = run_fv(*model, cfg, init);
  omp_set_num_threads(3);
  const auto r2 = run_fv(*model, cfg, init);
  CHECK(r1.deaths_per_step == r2.deaths_per_step);
  REQUIRE(r1.snapshots.size() == 5);
  CHECK(r1.snapshots.back().step == 40);
  CHECK(r1.snapshots.back().states == r2.snapshots.back().states);
  cfg.seed = 18;
  CHECK(run_fv(*model, cfg, init).snapshots.back().states != r1.snapshots.back().states);
}

TEST_CASE("Q_mu one-step law matches the closed form on two_point") {
  const double a = 1.0, b = 2.0, g = 0.4;
  auto model = make_model(presets::TwoPoint{a, b}, g);
  const std::vector<double> pts = {0.0, 1.0, 1.0, 1.0};  // mu = (1/4, 3/4)
  const EmpiricalSource src(1, pts);
  for (int x : {0, 1}) {
    const auto law = q_mu_law(a, b, g, x, {0.25, 0.75});
    int hits0 = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      Stream rng = Stream::derive(5, static_cast<std::uint64_t>(x), static_cast<std::uint64_t>(i));
      const double xs = x;
      const auto d = q_mu_step(*model, {&xs, 1}, src, rng, 1000);
      REQUIRE((d.state[0] == 0.0 || d.state[0] == 1.0));
      hits0 += d.state[0] == 0.0;
    }
    CAPTURE(x);
    CHECK(law[0] + law[1] == doctest::Approx(1.0));
    CHECK(std::abs(hits0 / double(n) - law[0]) < 5 * std::sqrt(0.25 / n));
  }
}

TEST_CASE("N = 2 step: particles move independently under the frozen empirical measure") {
  const double a = 1.0, b = 2.0, g = 0.4;
  auto model = make_model(presets::TwoPoint{a, b}, g);
  const auto l0 = q_mu_law(a, b, g, 0, {0.5, 0.5});
  const auto l1 = q_mu_law(a, b, g, 1, {0.5, 0.5});
  std::map<std::pair<double, double>, int> joint;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    ParticleEnsemble e(1, {0.0, 1.0}, static_cast<std::uint64_t>(i));
    const auto next = fv_step(*model, e);
    ++joint[{next.states()[0], next.states()[1]}];
  }
  for (int y0 : {0, 1})
    for (int y1 : {0, 1}) {
      const double p = l0[y0] * l1[y1];
      const double f = joint[{double(y0), double(y1)}] / double(n);
      CAPTURE(y0);
      CAPTURE(y1);
      CHECK(std::abs(f - p) < 5 * std::sqrt(p * (1 - p) / n) + 1e-4);
    }
}

TEST_CASE("resurrection loop gives up after max_iters") {
  Doomed model;
  ParticleEnsemble e(1, {0.1, 0.2, 0.3}, 1);
  CHECK_THROWS_AS(fv_step(model, e, 10), ResurrectionOverflowError);
  CHECK_THROWS_AS(fv_step_serial(model, e, 10), ResurrectionOverflowError);
}

TEST_CASE("config validation") {
  auto model = make_model(presets::TorusDiffusion{}, 0.05);
  FVConfig cfg;
  cfg.gamma = 0.05;
  CHECK_NOTHROW(cfg.validate(*model));
  cfg.gamma = 0.1;
  CHECK_THROWS_AS(cfg.validate(*model), InputError);
  cfg.gamma = 0.05;
  cfg.n_particles = 0;
  CHECK_THROWS_AS(cfg.validate(*model), InputError);
}

TEST_CASE("initial ensembles draw from the requested law") {
  auto model = make_model(presets::TorusDiffusion{}, 0.05);
  const auto e = initial_ensemble(*model, 50, DiracMeasure({0.25}), 3);
  for (double x : e.states()) CHECK(x == 0.25);
  auto fin = make_model(presets::TwoPoint{}, 0.1);
  const auto f = initial_ensemble(*fin, 20000, FiniteStateMeasure({0.3, 0.7}), 3);
  double ones = 0;
  for (double x : f.states()) ones += x;
  CHECK(ones / 20000 == doctest::Approx(0.7).epsilon(0.03));
}

TEST_CASE("reports round-trip to disk") {
  auto model = make_model(presets::TorusDiffusion{}, 0.05);
  FVConfig cfg;
  cfg.gamma = 0.05;
  cfg.n_particles = 64;
  cfg.n_steps = 20;
  cfg.snapshot_stride = 10;
  const auto r = run_fv(*model, cfg, UniformCubeMeasure(1));
  const auto j = report_to_json(r);
  CHECK(j.at("deaths_per_step").size() == 20);
  const auto dir = std::filesystem::temp_directory_path() / "qsdlab_test_report";
  std::filesystem::remove_all(dir);
  write_report(r, dir);
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "snapshot_00000020.csv"));
  std::filesystem::remove_all(dir);
}
