#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <deque>
#include <numbers>
#include <vector>

#include "qsdlab/errors.hpp"
#include "qsdlab/models.hpp"

using namespace qsdlab;

namespace {

// Replays scripted draws; normal() returns the scripted value directly.
struct Scripted final : RandomSource {
  std::deque<double> u, z;
  double uniform() override {
    const double v = u.front();
    u.pop_front();
    return v;
  }
  double normal() override {
    const double v = z.front();
    z.pop_front();
    return v;
  }
};

double frac(double x) { return x - std::floor(x); }

}  // namespace

TEST_CASE("soft kill probability is accurate for tiny arguments") {
  CHECK(soft_kill_probability(2.0, 0.5) == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-15));
  CHECK(soft_kill_probability(1e-3, 1e-12) == doctest::Approx(1e-15).epsilon(1e-12));
  CHECK(soft_kill_probability(0.0, 1.0) == 0.0);
}

TEST_CASE("house_of_card theta solves log((2-theta)/(1-theta)) = 1 at c = q = 1") {
  const double e = std::numbers::e;
  CHECK(house_of_card_theta(1.0, 1.0) == doctest::Approx((e - 2.0) / (e - 1.0)).epsilon(1e-10));
  // q = 2: int dx / (1 - theta + c x^2) = atan(sqrt(c/k)) / sqrt(c k) with k = 1 - theta.
  const double th = house_of_card_theta(3.0, 2.0);
  const double k = 1.0 - th;
  CHECK(std::atan(std::sqrt(3.0 / k)) / std::sqrt(3.0 * k) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("two_point closed-form QSDs") {
  const auto an = analytic_qsd(presets::TwoPoint{1.0, 2.0});
  REQUIRE(an);
  REQUIRE(an->qsds.size() == 2);
  CHECK(an->qsds[0].theta == 1.0);
  CHECK(an->qsds[0].atoms[0].second == doctest::Approx(0.5));
  CHECK(an->qsds[0].atoms[1].second == doctest::Approx(0.5));
  CHECK(an->qsds[1].theta == 2.0);
  CHECK(analytic_qsd(presets::TwoPoint{2.0, 1.0})->qsds.size() == 1);
}

TEST_CASE("finite chain generators have row sums equal to minus the kill rate") {
  for (const Preset& p : {Preset{presets::TwoPoint{1.0, 2.0}}, Preset{presets::BirthDeath{4, 1, 1, 0.1, 30}}}) {
    const auto ch = finite_chain(p);
    REQUIRE(ch);
    ch->validate();
    const auto q = ch->generator();
    for (Eigen::Index i = 0; i < q.rows(); ++i) CHECK(q.row(i).sum() == doctest::Approx(-ch->kill_rates(i)));
  }
  CHECK_FALSE(finite_chain(presets::IntervalBrownian{}));
}

TEST_CASE("finite chain step law matches the 2x2 closed-form semigroup") {
  const double a = 1.0, b = 2.0, g = 0.3;
  auto model = make_model(presets::TwoPoint{a, b}, g);
  // from index 1: stay e^{-a g}; reach index 0 and survive a(e^{-ag} - e^{-bg})/(b - a)
  const double stay = std::exp(-a * g);
  const double to0 = a * (std::exp(-a * g) - std::exp(-b * g)) / (b - a);
  Stream rng(11);
  const int n = 200000;
  int c0 = 0, c1 = 0, dead = 0;
  std::vector<double> out(1);
  for (int i = 0; i < n; ++i) {
    const double x = 1.0;
    model->propose({&x, 1}, out, rng);
    if (model->kill_prob(out) == 1.0) ++dead;
    else if (out[0] == 0.0) ++c0;
    else ++c1;
  }
  const double se = std::sqrt(0.25 / n);
  CHECK(std::abs(c1 / double(n) - stay) < 5 * se);
  CHECK(std::abs(c0 / double(n) - to0) < 5 * se);
  CHECK(std::abs(dead / double(n) - (1 - stay - to0)) < 5 * se);
}

TEST_CASE("torus diffusion step is an Euler-Maruyama step wrapped to the unit circle") {
  const double g = 0.04;
  auto model = make_model(presets::TorusDiffusion{1, 1.0, 1.0, 0.5}, g);
  Scripted s;
  s.z = {0.7};
  s.u = {};
  const double x = 0.95;
  std::vector<double> out(1);
  model->propose({&x, 1}, out, s);
  const double drift = std::sin(2 * std::numbers::pi * x);
  CHECK(out[0] == doctest::Approx(frac(x + g * drift + std::sqrt(g) * 0.7)).epsilon(1e-14));
  const double lam = 1.0 + 0.5 * std::cos(2 * std::numbers::pi * out[0]);
  CHECK(model->kill_prob(out) == doctest::Approx(1.0 - std::exp(-g * lam)));
}

TEST_CASE("interval Brownian is hard-killed outside (0,1)") {
  auto model = make_model(presets::IntervalBrownian{}, 0.01);
  CHECK(model->hard_kill());
  const double in = 0.5, lo = -0.01, hi = 1.2;
  CHECK(model->kill_prob({&in, 1}) == 0.0);
  CHECK(model->kill_prob({&lo, 1}) == 1.0);
  CHECK(model->kill_prob({&hi, 1}) == 1.0);
}

TEST_CASE("periodic shift is deterministic rotation by gamma") {
  auto model = make_model(presets::PeriodicShift{}, 0.3);
  Stream rng(1);
  double x = 0.9;
  std::vector<double> out(1);
  model->propose({&x, 1}, out, rng);
  CHECK(out[0] == doctest::Approx(0.2));
}

TEST_CASE("growth_frag flow and division") {
  auto model = make_model(presets::GrowthFrag{1.0, 0.5, 2.0, 0.5}, 0.1);
  Stream rng(3);
  const double x = 1.0;
  std::vector<double> out(1);
  for (int i = 0; i < 200; ++i) {
    model->propose({&x, 1}, out, rng);
    // x e^{alpha g} r^k for some integer k >= 0
    const double k = std::log(out[0] / std::exp(0.1)) / std::log(0.5);
    CHECK(k == doctest::Approx(std::round(k)).epsilon(1e-9));
    CHECK(k > -1e-9);
  }
}

TEST_CASE("invalid preset parameters are rejected") {
  CHECK_THROWS_AS(validate_preset(presets::TwoPoint{-1.0, 2.0}), InputError);
  CHECK_THROWS_AS(validate_preset(presets::GrowthFrag{1.0, 1.5, 1.0, 0.1}), InputError);
  CHECK_THROWS_AS(validate_preset(presets::BirthDeath{4, 1, 1, 0.1, 0}), InputError);
  CHECK_THROWS_AS(validate_preset(presets::TorusDiffusion{0, 1, 1, 1}), InputError);
}
