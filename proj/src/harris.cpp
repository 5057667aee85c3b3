#include "qsdlab/harris.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"
#include "qsdlab/metrics.hpp"

namespace qsdlab {

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    case Verdict::asymptotic_fail: return "asymptotic_fail";
  }
  return "unknown";
}

bool HarrisCertificate::all_pass() const {
  return a1.verdict == Verdict::pass && a2.verdict == Verdict::pass && a3.verdict == Verdict::pass &&
         a4.verdict == Verdict::pass;
}

namespace {

using Eigen::Index;

Index ix(std::size_t i) { return static_cast<Index>(i); }

// Quantities that do not depend on K or nu.
struct Precomputed {
  Eigen::VectorXd mv;    // M V
  Eigen::VectorXd mpsi;  // M psi
  Eigen::MatrixXd w;     // w(x, y) = M(x, y) psi(y) / (M psi)(x)
  Eigen::MatrixXd r;     // r(n-1, x) = (M^n psi)(x) / psi(x), each row rescaled by its max
};

Precomputed precompute(const Eigen::MatrixXd& m, const Eigen::VectorXd& V, const Eigen::VectorXd& psi,
                       std::size_t n_max) {
  Precomputed p;
  p.mv = m * V;
  p.mpsi = m * psi;
  const Index n = m.rows();
  p.w.resize(n, n);
  for (Index x = 0; x < n; ++x) {
    const double denom = p.mpsi(x);
    for (Index y = 0; y < n; ++y) p.w(x, y) = denom > 0.0 ? m(x, y) * psi(y) / denom : 0.0;
  }
  p.r.resize(ix(n_max), n);
  Eigen::VectorXd v = psi / psi.maxCoeff();
  for (std::size_t k = 0; k < n_max; ++k) {
    v = m * v;
    const double top = v.maxCoeff();
    if (top > 0.0) v /= top;
    Eigen::VectorXd ratio = v.cwiseQuotient(psi);
    const double rmax = ratio.maxCoeff();
    if (rmax > 0.0) ratio /= rmax;
    p.r.row(ix(k)) = ratio.transpose();
  }
  return p;
}

void validate_inputs(const KilledSemigroupMatrix& m, const Eigen::VectorXd& V, const Eigen::VectorXd& psi,
                     const std::vector<std::size_t>& K, const Eigen::VectorXd& nu, std::size_t n_max) {
  m.validate();
  const auto n = m.size();
  if (static_cast<std::size_t>(V.size()) != n || static_cast<std::size_t>(psi.size()) != n ||
      static_cast<std::size_t>(nu.size()) != n)
    throw InputError("harris: V, psi and nu must match the matrix size");
  if (!V.allFinite() || !(V.minCoeff() > 0.0)) throw InputError("harris: V must be strictly positive");
  if (!psi.allFinite() || !(psi.minCoeff() > 0.0)) throw InputError("harris: psi must be strictly positive");
  if (K.empty()) throw InputError("harris: K must be nonempty");
  for (std::size_t i = 0; i < K.size(); ++i) {
    if (K[i] >= n) throw InputError("harris: K index out of range");
    if (i > 0 && K[i] == K[i - 1]) throw InputError("harris: duplicate K index");
  }
  if ((nu.array() < 0.0).any() || std::abs(nu.sum() - 1.0) > 1e-9)
    throw InputError("harris: nu must be a probability vector");
  std::vector<bool> inK(n, false);
  for (auto k : K) inK[k] = true;
  for (std::size_t i = 0; i < n; ++i)
    if (nu(ix(i)) > 0.0 && !inK[i]) throw InputError("harris: nu must be supported by K");
  if (n_max < 1) throw InputError("harris: n_max must be >= 1");
}

// Ratio sequence verdict: zero is a fail, a sequence still shrinking
// geometrically at the last depth is an asymptotic fail.
Verdict a4_verdict(const std::vector<double>& ratios, double d) {
  if (!(d > kHarrisZero)) return Verdict::fail;
  const std::size_t n = ratios.size();
  if (n >= 4) {
    const std::size_t half = n / 2;
    bool decreasing = true;
    for (std::size_t k = half; k + 1 < n; ++k)
      if (ratios[k + 1] > ratios[k] * (1.0 + 1e-12)) decreasing = false;
    if (decreasing && ratios[n - 1] < 0.5 * ratios[half - 1]) return Verdict::asymptotic_fail;
  }
  return Verdict::pass;
}

HarrisCertificate evaluate(const Precomputed& p, double t0, const Eigen::VectorXd& V, const Eigen::VectorXd& psi,
                           std::vector<std::size_t> K, const Eigen::VectorXd& nu, std::size_t n_max) {
  const auto n = static_cast<std::size_t>(V.size());
  std::vector<bool> inK(n, false);
  for (auto k : K) inK[k] = true;

  HarrisCertificate cert;
  cert.t0 = t0;
  cert.V = V;
  cert.psi = psi;
  cert.nu = nu;
  cert.n_max = n_max;

  // A2
  {
    double beta = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t x = 0; x < n; ++x) {
      const double r = p.mpsi(ix(x)) / psi(ix(x));
      if (r < beta) {
        beta = r;
        arg = x;
      }
    }
    cert.beta = beta;
    cert.a2 = {beta > 0.0 ? Verdict::pass : Verdict::fail, beta, arg, std::nullopt, "min M psi / psi"};
  }

  // A1
  {
    double alpha = 0.0;
    std::size_t arg = K.front();
    bool outside = false;
    for (std::size_t x = 0; x < n; ++x) {
      if (inK[x]) continue;
      const double r = p.mv(ix(x)) / V(ix(x));
      if (!outside || r > alpha) {
        alpha = r;
        arg = x;
      }
      outside = true;
    }
    std::string detail = "max over states outside K of M V / V";
    if (!outside) {
      alpha = 0.5 * cert.beta;
      detail = "K is the whole space; alpha set to beta / 2";
    }
    double C = 0.0;
    for (auto x : K) C = std::max(C, (p.mv(ix(x)) - alpha * V(ix(x))) / psi(ix(x)));
    cert.alpha = alpha;
    cert.C = std::max(C, std::numeric_limits<double>::min());
    const bool ok = alpha > 0.0 && alpha < cert.beta;
    cert.a1 = {ok ? Verdict::pass : Verdict::fail, alpha, arg, std::nullopt, detail};
  }

  // A3
  {
    double c = std::numeric_limits<double>::infinity();
    std::size_t ax = K.front(), ay = K.front();
    for (auto x : K)
      for (std::size_t y = 0; y < n; ++y) {
        if (!(nu(ix(y)) > 0.0)) continue;
        const double r = p.w(ix(x), ix(y)) / nu(ix(y));
        if (r < c) {
          c = r;
          ax = x;
          ay = y;
        }
      }
    c = std::min(c, 1.0);
    cert.c = c;
    cert.a3 = {c > kHarrisZero ? Verdict::pass : Verdict::fail, c, ax, ay,
               "min over x in K, y in supp nu of M(1_y psi)(x) / (M psi)(x) / nu(y)"};
  }

  // A4
  {
    cert.a4_ratios.resize(n_max);
    double d = std::numeric_limits<double>::infinity();
    std::size_t arg = 1;
    for (std::size_t k = 0; k < n_max; ++k) {
      double num = 0.0, den = 0.0;
      for (std::size_t y = 0; y < n; ++y) num += nu(ix(y)) * p.r(ix(k), ix(y));
      for (auto x : K) den = std::max(den, p.r(ix(k), ix(x)));
      const double ratio = den > 0.0 ? num / den : 0.0;
      cert.a4_ratios[k] = ratio;
      if (ratio < d) {
        d = ratio;
        arg = k + 1;
      }
    }
    d = std::min(d, 1.0);
    cert.d = d;
    cert.a4 = {a4_verdict(cert.a4_ratios, d), d, arg, std::nullopt,
               fmt::format("min over n <= {} of nu(M^n psi / psi) / max_K (M^n psi / psi)", n_max)};
  }

  double sup = 0.0;
  for (auto x : K) sup = std::max(sup, V(ix(x)) / psi(ix(x)));
  cert.sup_K_V_over_psi = sup;
  cert.K = std::move(K);
  return cert;
}

// Poisson(mean) weights in log space, usable for large means.
std::vector<double> poisson_weights_log(double mean, double tol) {
  std::vector<double> w;
  if (mean == 0.0) return {1.0};
  const double hi = mean + 12.0 * std::sqrt(mean) + 30.0;
  double cum = 0.0;
  for (std::size_t k = 0; static_cast<double>(k) <= hi; ++k) {
    const double kk = static_cast<double>(k);
    const double lw = -mean + kk * std::log(mean) - std::lgamma(kk + 1.0);
    w.push_back(std::exp(lw));
    cum += w.back();
    if (kk > mean && 1.0 - cum < tol) break;
  }
  return w;
}

}  // namespace

HarrisCertificate check_assumptions(const KilledSemigroupMatrix& m, const Eigen::VectorXd& V,
                                    const Eigen::VectorXd& psi, std::vector<std::size_t> K,
                                    const Eigen::VectorXd& nu, std::size_t n_max) {
  std::sort(K.begin(), K.end());
  validate_inputs(m, V, psi, K, nu, n_max);
  const auto p = precompute(m.m, V, psi, n_max);
  return evaluate(p, m.horizon, V, psi, std::move(K), nu, n_max);
}

IrreducibilityResult check_irreducibility(const FiniteKilledChain& chain, const std::vector<std::size_t>& K,
                                          double t0) {
  chain.validate();
  if (K.empty()) throw InputError("check_irreducibility: K must be nonempty");
  if (!(t0 > 0.0)) throw InputError("check_irreducibility: t0 must be positive");
  const auto n = chain.n_states();
  for (auto k : K)
    if (k >= n) throw InputError("check_irreducibility: K index out of range");

  IrreducibilityResult res{1.0, true, K.front(), K.front()};
  if (K.size() == 1) return res;
  const double rate = chain.max_outflow();
  if (rate == 0.0) return {0.0, false, K[0], K[1]};

  Eigen::MatrixXd p = chain.generator() / rate;
  p += Eigen::MatrixXd::Identity(ix(n), ix(n));
  p = p.cwiseMax(0.0);
  const auto w = poisson_weights_log(rate * t0, 1e-14);

  for (auto y : K) {
    // Row y absorbing; u_k(x) = P_x(at y after k sub-steps) = P_x(hit y within k).
    Eigen::MatrixXd pa = p;
    pa.row(ix(y)).setZero();
    pa(ix(y), ix(y)) = 1.0;
    Eigen::VectorXd u = Eigen::VectorXd::Zero(ix(n));
    u(ix(y)) = 1.0;
    Eigen::VectorXd hit = w[0] * u;
    for (std::size_t k = 1; k < w.size(); ++k) {
      u = pa * u;
      hit.noalias() += w[k] * u;
    }
    for (auto x : K) {
      if (x == y) continue;
      const double e = std::clamp(hit(ix(x)), 0.0, 1.0);
      if (e < res.epsilon) res = {e, false, x, y};
    }
  }
  res.pass = res.epsilon > 0.0;
  return res;
}

std::pair<double, double> fit_normalized_decay(const KilledSemigroupMatrix& m, const EigenTriplet& triplet,
                                               const Eigen::VectorXd& V, const Eigen::VectorXd& mu,
                                               std::size_t steps) {
  const double rho = std::exp(-triplet.theta * m.horizon);
  const Eigen::MatrixXd mt = m.m.transpose();
  const Eigen::VectorXd target = mu.dot(triplet.h) * triplet.gamma_left;
  const double scale = target.cwiseProduct(V).sum();
  std::vector<double> ts, errs;
  Eigen::VectorXd v = mu;
  for (std::size_t k = 1; k <= steps; ++k) {
    v = mt * v / rho;
    const double err = (v - target).cwiseAbs().cwiseProduct(V).sum();
    if (!(err > 1e-9 * scale)) break;
    ts.push_back(static_cast<double>(k) * m.horizon);
    errs.push_back(err);
  }
  // Fit the tail, past the transient of the first iterates.
  const std::size_t start = ts.size() / 3;
  if (ts.size() - start < 3) return {std::numeric_limits<double>::infinity(), 0.0};
  const auto fit = fit_exponential_rate(std::span(ts).subspan(start), std::span(errs).subspan(start));
  return {-fit.slope, fit.r2};
}

ConclusionReport verify_conclusion(const KilledSemigroupMatrix& m, const HarrisCertificate& cert) {
  if (!cert.all_pass()) throw PreconditionError("verify_conclusion needs a certificate with all verdicts passing");
  if (static_cast<std::size_t>(cert.V.size()) != m.size())
    throw InputError("verify_conclusion: certificate does not match the matrix");
  ConclusionReport rep;
  rep.triplet = perron_triplet(m);
  rep.rho = std::exp(-rep.triplet.theta * m.horizon);
  rep.lower_slack = rep.rho - cert.beta;
  rep.upper_slack = cert.alpha + cert.C - rep.rho;
  rep.bounds_hold = rep.lower_slack >= -1e-12 && rep.upper_slack >= -1e-12;
  rep.gamma_V = rep.triplet.gamma_left.dot(cert.V);
  rep.c2 = rep.triplet.h.cwiseQuotient(cert.V).maxCoeff();
  const Eigen::VectorXd ratio = cert.psi.cwiseQuotient(cert.V);
  for (int k = 1; k <= 9; ++k) {
    const double q = 0.1 * k;
    const Eigen::VectorXd lower = ratio.array().pow(q).matrix().cwiseProduct(cert.psi);
    rep.c1_by_q.emplace_back(q, rep.triplet.h.cwiseQuotient(lower).minCoeff());
  }
  const auto n = static_cast<Index>(m.size());
  const Eigen::VectorXd mu = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  std::tie(rep.omega, rep.omega_r2) = fit_normalized_decay(m, rep.triplet, cert.V, mu);
  if (m.size() <= 400) rep.spectral_gap = leading_rates(m).gap();
  return rep;
}

SearchResult search_lyapunov_pair(const FiniteKilledChain& chain, const SearchOptions& opts) {
  chain.validate();
  std::vector<double> q2_grid = opts.q2_grid;
  if (q2_grid.empty())
    for (int k = 0; k <= 38; ++k) q2_grid.push_back(0.1 + 0.05 * k);
  if (opts.q1_grid.empty() || q2_grid.empty()) throw InputError("search needs nonempty parameter grids");
  if (opts.n_max < 1) throw InputError("search needs n_max >= 1");

  const auto n = chain.n_states();
  const double rate = chain.max_outflow();
  const double t0 = opts.t0.value_or(rate > 0.0 ? 10.0 / rate : 1.0);
  const auto m = killed_semigroup(chain, t0);

  auto family_value = [&](double q, std::size_t i) {
    const double x = chain.coordinate(i);
    return opts.family == LyapunovFamily::geometric ? std::pow(q, x) : std::exp(q * x);
  };

  struct Candidate {
    bool valid = false;
    int passes = -1;
    double margin = -std::numeric_limits<double>::infinity();
    double C = std::numeric_limits<double>::infinity();
    std::size_t pair = 0;
    std::vector<std::size_t> K;
    Eigen::VectorXd nu;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    if (!b.valid) return a.valid;
    if (a.passes != b.passes) return a.passes > b.passes;
    if (a.margin != b.margin) return a.margin > b.margin;
    return a.C < b.C;
  };

  const std::size_t n_pairs = opts.q1_grid.size() * q2_grid.size();
  std::vector<Candidate> best_per_pair(n_pairs);
  std::vector<std::array<std::size_t, 4>> fails_per_pair(n_pairs);
  std::vector<std::size_t> count_per_pair(n_pairs, 0), pass_per_pair(n_pairs, 0);

#pragma omp parallel for schedule(dynamic)
  for (std::size_t pi = 0; pi < n_pairs; ++pi) {
    const double q1 = opts.q1_grid[pi / q2_grid.size()];
    const double q2 = q2_grid[pi % q2_grid.size()];
    Eigen::VectorXd V(ix(n)), psi(ix(n));
    for (std::size_t i = 0; i < n; ++i) {
      V(ix(i)) = family_value(q1, i);
      psi(ix(i)) = family_value(q2, i);
    }
    if (!V.allFinite() || !psi.allFinite() || !(V.minCoeff() > 0.0) || !(psi.minCoeff() > 0.0)) continue;
    const auto p = precompute(m.m, V, psi, opts.n_max);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // K ranges over sublevel sets of V / psi, which keeps sup_K V / psi small.
    const Eigen::VectorXd ratio = V.cwiseQuotient(psi);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ratio(ix(a)) < ratio(ix(b)); });

    const std::size_t k_last = opts.k_policy == KPolicy::all_sublevel_sets ? n : n - 1;
    for (std::size_t k = 1; k <= k_last; ++k) {
      if (k < n && ratio(ix(order[k - 1])) == ratio(ix(order[k]))) continue;  // not a sublevel set
      std::vector<std::size_t> K(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(K.begin(), K.end());

      // Pick nu among Diracs on K and uniform on K by (A3 pass, d).
      std::vector<double> den(opts.n_max, 0.0);
      for (std::size_t s = 0; s < opts.n_max; ++s)
        for (auto y : K) den[s] = std::max(den[s], p.r(ix(s), ix(y)));
      auto a4_of = [&](auto&& numerator) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < opts.n_max; ++s) d = std::min(d, den[s] > 0.0 ? numerator(s) / den[s] : 0.0);
        return d;
      };
      Eigen::VectorXd best_nu;
      double best_c = -1.0, best_d = -1.0;
      bool best_c_ok = false;
      auto offer = [&](double c, double d, auto&& make_nu) {
        const bool c_ok = c > kHarrisZero;
        const bool take = best_nu.size() == 0 || (c_ok && !best_c_ok) ||
                          (c_ok == best_c_ok && (c_ok ? d > best_d : c > best_c));
        if (!take) return;
        best_nu = make_nu();
        best_c = c;
        best_d = d;
        best_c_ok = c_ok;
      };
      for (auto y : K) {
        double c = std::numeric_limits<double>::infinity();
        for (auto x : K) c = std::min(c, p.w(ix(x), ix(y)));
        const double d = a4_of([&](std::size_t s) { return p.r(ix(s), ix(y)); });
        offer(c, d, [&] {
          Eigen::VectorXd nu = Eigen::VectorXd::Zero(ix(n));
          nu(ix(y)) = 1.0;
          return nu;
        });
      }
      if (K.size() > 1) {
        const double inv = 1.0 / static_cast<double>(K.size());
        double wmin = std::numeric_limits<double>::infinity();
        for (auto x : K)
          for (auto y : K) wmin = std::min(wmin, p.w(ix(x), ix(y)));
        const double d = a4_of([&](std::size_t s) {
          double num = 0.0;
          for (auto y : K) num += inv * p.r(ix(s), ix(y));
          return num;
        });
        offer(wmin / inv, d, [&] {
          Eigen::VectorXd nu = Eigen::VectorXd::Zero(ix(n));
          for (auto y : K) nu(ix(y)) = inv;
          return nu;
        });
      }

      const auto cert = evaluate(p, t0, V, psi, K, best_nu, opts.n_max);
      const std::array<bool, 4> ok = {cert.a1.verdict == Verdict::pass, cert.a2.verdict == Verdict::pass,
                                      cert.a3.verdict == Verdict::pass, cert.a4.verdict == Verdict::pass};
      Candidate cand;
      cand.valid = true;
      cand.passes = static_cast<int>(std::count(ok.begin(), ok.end(), true));
      cand.margin = cert.beta - cert.alpha;
      cand.C = cert.C;
      cand.pair = pi;
      ++count_per_pair[pi];
      for (std::size_t a = 0; a < 4; ++a)
        if (!ok[a]) ++fails_per_pair[pi][a];
      if (cand.passes == 4) ++pass_per_pair[pi];
      if (better(cand, best_per_pair[pi])) {
        cand.K = std::move(K);
        cand.nu = std::move(best_nu);
        best_per_pair[pi] = std::move(cand);
      }
    }
  }

  SearchResult res;
  res.t0 = t0;
  Candidate best;
  for (std::size_t pi = 0; pi < n_pairs; ++pi) {
    res.candidates += count_per_pair[pi];
    res.passing += pass_per_pair[pi];
    for (std::size_t a = 0; a < 4; ++a) res.failures[a] += fails_per_pair[pi][a];
    if (better(best_per_pair[pi], best)) best = best_per_pair[pi];
  }
  if (!best.valid) {
    res.diagnostic = "no admissible candidate (V or psi not finite and positive on the grid)";
    return res;
  }
  res.q1 = opts.q1_grid[best.pair / q2_grid.size()];
  res.q2 = q2_grid[best.pair % q2_grid.size()];
  Eigen::VectorXd V(ix(n)), psi(ix(n));
  for (std::size_t i = 0; i < n; ++i) {
    V(ix(i)) = family_value(res.q1, i);
    psi(ix(i)) = family_value(res.q2, i);
  }
  res.best = check_assumptions(m, V, psi, best.K, best.nu, opts.n_max);
  res.found = res.best.all_pass();
  if (res.found) {
    res.diagnostic = fmt::format("{} of {} candidates pass", res.passing, res.candidates);
  } else {
    res.diagnostic = fmt::format(
        "inconclusive: no candidate passes; failures A1 {} A2 {} A3 {} A4 {} of {} candidates", res.failures[0],
        res.failures[1], res.failures[2], res.failures[3], res.candidates);
  }
  return res;
}

namespace {

nlohmann::json check_to_json(const AssumptionCheck& c) {
  nlohmann::json j{{"verdict", to_string(c.verdict)}, {"value", c.value}, {"witness", c.witness},
                   {"detail", c.detail}};
  if (c.witness2) j["witness2"] = *c.witness2;
  return j;
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

nlohmann::json certificate_to_json(const HarrisCertificate& c) {
  return {{"t0", c.t0},
          {"V", to_vec(c.V)},
          {"psi", to_vec(c.psi)},
          {"K", c.K},
          {"nu", to_vec(c.nu)},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"C", c.C},
          {"c", c.c},
          {"d", c.d},
          {"sup_K_V_over_psi", c.sup_K_V_over_psi},
          {"n_max", c.n_max},
          {"all_pass", c.all_pass()},
          {"A1", check_to_json(c.a1)},
          {"A2", check_to_json(c.a2)},
          {"A3", check_to_json(c.a3)},
          {"A4", check_to_json(c.a4)},
          {"A4_ratios", c.a4_ratios}};
}

nlohmann::json conclusion_to_json(const ConclusionReport& r) {
  nlohmann::json c1 = nlohmann::json::array();
  for (const auto& [q, v] : r.c1_by_q) c1.push_back({{"q", q}, {"c1", v}});
  nlohmann::json j{{"theta", r.triplet.theta},
                   {"rho", r.rho},
                   {"lower_slack", r.lower_slack},
                   {"upper_slack", r.upper_slack},
                   {"bounds_hold", r.bounds_hold},
                   {"gamma_V", r.gamma_V},
                   {"c2", r.c2},
                   {"c1_by_q", c1},
                   {"omega", r.omega},
                   {"omega_r2", r.omega_r2},
                   {"h", to_vec(r.triplet.h)},
                   {"gamma", to_vec(r.triplet.gamma_left)}};
  if (r.spectral_gap) j["spectral_gap"] = *r.spectral_gap;
  return j;
}

nlohmann::json search_to_json(const SearchResult& r) {
  return {{"found", r.found},
          {"q1", r.q1},
          {"q2", r.q2},
          {"t0", r.t0},
          {"candidates", r.candidates},
          {"passing", r.passing},
          {"failures", {{"A1", r.failures[0]}, {"A2", r.failures[1]}, {"A3", r.failures[2]}, {"A4", r.failures[3]}}},
          {"diagnostic", r.diagnostic},
          {"certificate", certificate_to_json(r.best)}};
}

}  // namespace qsdlab
