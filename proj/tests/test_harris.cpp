#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "qsdlab/errors.hpp"
#include "qsdlab/harris.hpp"
#include "qsdlab/random.hpp"

using namespace qsdlab;

namespace {

FiniteKilledChain random_chain(std::size_t n, std::uint64_t seed) {
  Stream s(seed);
  FiniteKilledChain c;
  const auto k = static_cast<Eigen::Index>(n);
  c.jump_rates = Eigen::MatrixXd::Zero(k, k);
  c.kill_rates = Eigen::VectorXd::Zero(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j)
      if (i != j) c.jump_rates(i, j) = 2.0 * s.uniform();
    c.kill_rates(i) = s.uniform();
  }
  return c;
}

Eigen::VectorXd geometric(double q, std::size_t n) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = std::pow(q, static_cast<double>(i + 1));
  return v;
}

// Recomputes each constant at its recorded witness.
void check_witnesses(const KilledSemigroupMatrix& m, const HarrisCertificate& c) {
  const Eigen::VectorXd mv = m.m * c.V, mpsi = m.m * c.psi;
  const auto x2 = static_cast<Eigen::Index>(c.a2.witness);
  CHECK(mpsi(x2) / c.psi(x2) == doctest::Approx(c.beta).epsilon(1e-12));
  if (c.K.size() < m.size()) {
    const auto x1 = static_cast<Eigen::Index>(c.a1.witness);
    CHECK(mv(x1) / c.V(x1) == doctest::Approx(c.alpha).epsilon(1e-12));
  }
  REQUIRE(c.a3.witness2);
  const auto x3 = static_cast<Eigen::Index>(c.a3.witness), y3 = static_cast<Eigen::Index>(*c.a3.witness2);
  const double w = m.m(x3, y3) * c.psi(y3) / mpsi(x3) / c.nu(y3);
  CHECK(std::min(w, 1.0) == doctest::Approx(c.c).epsilon(1e-12));
  const auto n4 = c.a4.witness;
  REQUIRE(n4 >= 1);
  CHECK(c.a4_ratios[n4 - 1] == doctest::Approx(std::min(c.d, 1.0)).epsilon(1e-12));
}

}  // namespace

TEST_CASE("Doeblin kernel passes A3 with c at least epsilon") {
  const double eps = 0.3;
  Eigen::Vector3d nu(0.2, 0.5, 0.3);
  Eigen::Matrix3d m = 0.9 * ((1 - eps) * Eigen::Matrix3d::Identity() + eps * Eigen::Vector3d::Ones() * nu.transpose());
  const KilledSemigroupMatrix M{m, 1.0};
  const auto c = check_assumptions(M, Eigen::Vector3d::Ones(), Eigen::Vector3d::Ones(), {0, 1, 2}, nu);
  CHECK(c.a3.verdict == Verdict::pass);
  CHECK(c.c >= eps - 1e-12);
  CHECK(c.all_pass());
}

TEST_CASE("two_point fails A4 with ratio exp(-n) / (2 - exp(-n))") {
  const auto m = killed_semigroup(*finite_chain(presets::TwoPoint{1, 2}), 1.0);
  const auto c = check_assumptions(m, Eigen::Vector2d::Ones(), Eigen::Vector2d::Ones(), {0, 1}, Eigen::Vector2d(1, 0), 30);
  REQUIRE(c.a4_ratios.size() == 30);
  for (std::size_t n = 1; n <= 30; ++n) {
    const double e = std::exp(-static_cast<double>(n));
    CHECK(c.a4_ratios[n - 1] == doctest::Approx(e / (2 - e)).epsilon(1e-9));
  }
  CHECK(c.a4.verdict != Verdict::pass);
  CHECK(c.a3.verdict == Verdict::pass);
}

TEST_CASE("witnesses reproduce the reported constants") {
  const auto ch = random_chain(8, 4);
  const auto m = killed_semigroup(ch, 0.8);
  const auto V = geometric(1.3, 8), psi = geometric(0.9, 8);
  Eigen::VectorXd nu = Eigen::VectorXd::Zero(8);
  nu(0) = 0.5;
  nu(2) = 0.5;
  const auto c = check_assumptions(m, V, psi, {0, 1, 2}, nu);
  check_witnesses(m, c);
}

TEST_CASE("scaling V or psi changes constants predictably and never flips a verdict") {
  const auto ch = *finite_chain(presets::BirthDeath{4, 1, 1, 0.1, 40});
  const auto m = killed_semigroup(ch, 2.0);
  const auto V = geometric(0.45, 40), psi = geometric(0.2, 40);
  Eigen::VectorXd nu = Eigen::VectorXd::Zero(40);
  nu(0) = 1.0;
  const std::vector<std::size_t> K = {0, 1};
  const auto base = check_assumptions(m, V, psi, K, nu);
  REQUIRE(base.all_pass());
  const auto sv = check_assumptions(m, 3.0 * V, psi, K, nu);
  CHECK(sv.alpha == doctest::Approx(base.alpha).epsilon(1e-12));
  CHECK(sv.C == doctest::Approx(3.0 * base.C).epsilon(1e-12));
  const auto sp = check_assumptions(m, V, 2.0 * psi, K, nu);
  CHECK(sp.beta == doctest::Approx(base.beta).epsilon(1e-12));
  CHECK(sp.C == doctest::Approx(base.C / 2.0).epsilon(1e-12));
  CHECK(sp.c == doctest::Approx(base.c).epsilon(1e-12));
  CHECK(sp.d == doctest::Approx(base.d).epsilon(1e-12));
  for (const auto* s : {&sv, &sp}) {
    CHECK(s->a1.verdict == base.a1.verdict);
    CHECK(s->a2.verdict == base.a2.verdict);
    CHECK(s->a3.verdict == base.a3.verdict);
    CHECK(s->a4.verdict == base.a4.verdict);
  }
}

TEST_CASE("nonpositive inputs are rejected") {
  const KilledSemigroupMatrix m{Eigen::Matrix2d::Identity() * 0.5, 1.0};
  CHECK_THROWS_AS(check_assumptions(m, Eigen::Vector2d(1, 0), Eigen::Vector2d::Ones(), {0}, Eigen::Vector2d(1, 0)),
                  InputError);
  CHECK_THROWS_AS(check_assumptions(m, Eigen::Vector2d::Ones(), Eigen::Vector2d(1, -1), {0}, Eigen::Vector2d(1, 0)),
                  InputError);
}

TEST_CASE("irreducibility surrogate") {
  const auto tp = *finite_chain(presets::TwoPoint{1, 2});
  CHECK(check_irreducibility(tp, {1}, 1.0).epsilon == 1.0);
  const auto r = check_irreducibility(tp, {0, 1}, 1.0);
  CHECK_FALSE(r.pass);
  CHECK(r.epsilon == 0.0);
  CHECK(r.witness_from == 0);
  CHECK(r.witness_to == 1);

  // two states: P_x(hit y before t) = r / (r + k) (1 - e^{-(r + k) t})
  FiniteKilledChain c;
  c.jump_rates = Eigen::Matrix2d{{0, 2.0}, {0.5, 0}};
  c.kill_rates = Eigen::Vector2d(1.0, 0.25);
  const double t = 0.7;
  const double p01 = 2.0 / 3.0 * (1 - std::exp(-3.0 * t)), p10 = 0.5 / 0.75 * (1 - std::exp(-0.75 * t));
  const auto e = check_irreducibility(c, {0, 1}, t);
  CHECK(e.epsilon == doctest::Approx(std::min(p01, p10)).epsilon(1e-12));
  CHECK(e.pass);

  const auto bd = *finite_chain(presets::BirthDeath{4, 1, 1, 0.1, 100});
  std::vector<std::size_t> K;
  for (std::size_t i = 0; i < 20; ++i) K.push_back(i);
  const auto b = check_irreducibility(bd, K, 5.0);
  CHECK(b.pass);
  CHECK(b.epsilon > 0.0);
}

TEST_CASE("search finds a certificate on birth_death(4,1,1,0.1) and it implies the eigenvalue bounds") {
  const auto ch = *finite_chain(presets::BirthDeath{4, 1, 1, 0.1, 100});
  const auto res = search_lyapunov_pair(ch);
  REQUIRE(res.found);
  CHECK(res.best.all_pass());
  const auto m = killed_semigroup(ch, res.t0);
  check_witnesses(m, res.best);
  const auto rep = verify_conclusion(m, res.best);
  CHECK(rep.bounds_hold);
  CHECK(rep.lower_slack > 0.0);
  CHECK(rep.upper_slack > 0.0);
  CHECK(std::isfinite(rep.c2));
  bool half = false;
  for (const auto& [q, c1] : rep.c1_by_q)
    if (std::abs(q - 0.5) < 1e-12) {
      half = true;
      CHECK(c1 > 0.0);
    }
  CHECK(half);

}

TEST_CASE("(V, h) from a passing certificate passes again") {
  // short chain: on long ones h spans ~30 decades and Mh/h loses accuracy in the tail
  const auto ch = *finite_chain(presets::BirthDeath{4, 1, 1, 0.1, 12});
  const auto res = search_lyapunov_pair(ch);
  REQUIRE(res.found);
  const auto m = killed_semigroup(ch, res.t0);
  const auto rep = verify_conclusion(m, res.best);
  const auto again = check_assumptions(m, 5.0 * res.best.V, rep.triplet.h, res.best.K, res.best.nu);
  CHECK(again.all_pass());
  CHECK(again.beta == doctest::Approx(rep.rho).epsilon(1e-8));
}

TEST_CASE("search is inconclusive when the criterion is negative") {
  const auto ch = *finite_chain(presets::BirthDeath{1.2, 1, 1, 2, 100});
  const auto res = search_lyapunov_pair(ch);
  CHECK_FALSE(res.found);
  CHECK(res.diagnostic.rfind("inconclusive", 0) == 0);
}

TEST_CASE("conservative chain with drift to a compact is certified") {
  const std::size_t n = 30;
  FiniteKilledChain c;
  c.jump_rates = Eigen::MatrixXd::Zero(n, n);
  c.kill_rates = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    if (i + 1 < n) c.jump_rates(k, k + 1) = 1.0;
    if (i > 0) c.jump_rates(k, k - 1) = 4.0;
  }
  const auto res = search_lyapunov_pair(c);
  CHECK(res.found);
  const auto rep = verify_conclusion(killed_semigroup(c, res.t0), res.best);
  CHECK(rep.triplet.theta == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("two_point search fails everywhere") {
  SearchOptions o;
  o.k_policy = KPolicy::all_sublevel_sets;
  o.t0 = 1.0;
  const auto res = search_lyapunov_pair(*finite_chain(presets::TwoPoint{1, 2}), o);
  CHECK_FALSE(res.found);
  CHECK(res.failures[3] > 0);
}

TEST_CASE("verify_conclusion demands an all-pass certificate") {
  const auto m = killed_semigroup(*finite_chain(presets::TwoPoint{1, 2}), 1.0);
  const auto c = check_assumptions(m, Eigen::Vector2d::Ones(), Eigen::Vector2d::Ones(), {0, 1}, Eigen::Vector2d(1, 0));
  CHECK_THROWS_AS(verify_conclusion(m, c), PreconditionError);
}

TEST_CASE("normalized decay rate matches the spectral gap") {
  const auto ch = random_chain(6, 12);
  const auto m = killed_semigroup(ch, 0.25);
  const auto tr = perron_triplet(m);
  const auto gap = leading_rates(m).gap();
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(6);
  mu(0) = 1.0;
  const auto [omega, r2] = fit_normalized_decay(m, tr, Eigen::VectorXd::Ones(6), mu);
  CHECK(omega == doctest::Approx(gap).epsilon(0.1));
  CHECK(r2 > 0.99);
}
