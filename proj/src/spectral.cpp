#include "qsdlab/spectral.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"

namespace qsdlab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Poisson(mean) weights truncated once the remaining tail is below tol.
std::vector<double> poisson_weights(double mean, double tol) {
  std::vector<double> w;
  double p = std::exp(-mean);
  double cum = p;
  w.push_back(p);
  const double k_max = mean + 20.0 * std::sqrt(mean) + 40.0;
  for (std::size_t k = 1; 1.0 - cum > tol && static_cast<double>(k) < k_max; ++k) {
    p *= mean / static_cast<double>(k);
    cum += p;
    w.push_back(p);
  }
  return w;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

Eigen::MatrixXd uniformized_kernel(const FiniteKilledChain& chain, double rate) {
  const auto n = static_cast<Eigen::Index>(chain.n_states());
  Eigen::MatrixXd p = chain.generator() / rate;
  p += Eigen::MatrixXd::Identity(n, n);
  return p.cwiseMax(0.0);
}

void require_probability(const Eigen::VectorXd& eta, std::size_t n, const char* what) {
  if (static_cast<std::size_t>(eta.size()) != n) throw InputError(fmt::format("{}: size mismatch", what));
  if ((eta.array() < 0.0).any() || !eta.allFinite())
    throw InputError(fmt::format("{}: entries must be finite and nonnegative", what));
}

}  // namespace

void KilledSemigroupMatrix::validate() const {
  if (m.rows() != m.cols() || m.rows() == 0) throw InputError("semigroup matrix must be square and nonempty");
  if (!(horizon > 0.0)) throw InputError("semigroup horizon must be positive");
  if (!m.allFinite() || (m.array() < 0.0).any()) throw InputError("semigroup matrix entries must be nonnegative");
  if ((m.rowwise().sum().array() > 1.0 + 1e-12).any()) throw InputError("semigroup matrix is not sub-Markov");
}

KilledSemigroupMatrix killed_semigroup(const FiniteKilledChain& chain, double t) {
  chain.validate();
  if (!(t > 0.0) || !std::isfinite(t)) throw InputError("semigroup horizon must be positive");
  const auto n = static_cast<Eigen::Index>(chain.n_states());
  const double rate = chain.max_outflow();
  if (rate == 0.0) return {Eigen::MatrixXd::Identity(n, n), t};

  int squarings = 0;
  while (rate * t / std::ldexp(1.0, squarings) > 4.0) ++squarings;
  const double mean = rate * t / std::ldexp(1.0, squarings);
  const double tol = std::max(1e-12 / std::ldexp(1.0, squarings), 4e-16);
  const Eigen::MatrixXd p = uniformized_kernel(chain, rate);
  const auto w = poisson_weights(mean, tol);

  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd m = w[0] * term;
  for (std::size_t k = 1; k < w.size(); ++k) {
    term = term * p;
    m.noalias() += w[k] * term;
  }
  for (int s = 0; s < squarings; ++s) m = m * m;
  return {m, t};
}

Eigen::VectorXd propagate(const FiniteKilledChain& chain, const Eigen::VectorXd& eta, double t) {
  chain.validate();
  require_probability(eta, chain.n_states(), "propagate");
  if (!(t >= 0.0)) throw InputError("propagation time must be nonnegative");
  const double rate = chain.max_outflow();
  if (rate == 0.0 || t == 0.0) return eta;
  const Eigen::MatrixXd pt = uniformized_kernel(chain, rate).transpose();
  const auto pieces = static_cast<std::size_t>(std::ceil(rate * t / 50.0));
  const double mean = rate * t / static_cast<double>(pieces);
  const auto w = poisson_weights(mean, 1e-15 / static_cast<double>(pieces));
  Eigen::VectorXd cur = eta;
  for (std::size_t piece = 0; piece < pieces; ++piece) {
    Eigen::VectorXd term = cur;
    Eigen::VectorXd acc = w[0] * term;
    for (std::size_t k = 1; k < w.size(); ++k) {
      term = pt * term;
      acc.noalias() += w[k] * term;
    }
    cur = acc;
  }
  return cur;
}

Eigen::VectorXd conditional_law_step(const KilledSemigroupMatrix& m, const Eigen::VectorXd& eta) {
  require_probability(eta, m.size(), "conditional_law_step");
  const Eigen::VectorXd next = m.m.transpose() * eta;
  const double mass = next.sum();
  if (!(mass > 1e-300))
    throw ExtinctionUnderflowError(fmt::format("surviving mass {} is numerically zero", mass));
  return next / mass;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> communicating_classes(const Eigen::MatrixXd& m) {
  // Iterative Tarjan over the dense adjacency pattern.
  const auto n = static_cast<std::size_t>(m.rows());
  constexpr std::size_t unvisited = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> index(n, unvisited), low(n, 0), next_child(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<std::size_t> stack, call;
  std::vector<std::vector<std::size_t>> classes;
  std::size_t counter = 0;

  for (std::size_t root = 0; root < n; ++root) {
    if (index[root] != unvisited) continue;
    call.push_back(root);
    while (!call.empty()) {
      const std::size_t v = call.back();
      if (index[v] == unvisited) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
      }
      bool descended = false;
      while (next_child[v] < n) {
        const std::size_t w = next_child[v]++;
        if (w == v || !(m(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(w)) > 0.0)) continue;
        if (index[w] == unvisited) {
          call.push_back(w);
          descended = true;
          break;
        }
        if (on_stack[w]) low[v] = std::min(low[v], index[w]);
      }
      if (descended) continue;
      if (low[v] == index[v]) {
        std::vector<std::size_t> cls;
        std::size_t w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack[w] = false;
          cls.push_back(w);
        } while (w != v);
        std::sort(cls.begin(), cls.end());
        classes.push_back(std::move(cls));
      }
      call.pop_back();
      if (!call.empty()) low[call.back()] = std::min(low[call.back()], low[v]);
    }
  }
  // Tarjan emits sinks first.
  std::reverse(classes.begin(), classes.end());
  return classes;
}

std::size_t period(const Eigen::MatrixXd& m) {
  const auto n = static_cast<std::size_t>(m.rows());
  std::vector<long> level(n, -1);
  std::queue<std::size_t> q;
  level[0] = 0;
  q.push(0);
  std::size_t g = 0;
  while (!q.empty()) {
    const auto u = q.front();
    q.pop();
    for (std::size_t v = 0; v < n; ++v) {
      if (!(m(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) > 0.0)) continue;
      if (level[v] < 0) {
        level[v] = level[u] + 1;
        q.push(v);
      } else {
        g = std::gcd(g, static_cast<std::size_t>(std::abs(level[u] + 1 - level[v])));
      }
    }
  }
  return g == 0 ? 1 : g;
}

EigenTriplet perron_triplet(const KilledSemigroupMatrix& km, const PowerIterationOptions& opts) {
  km.validate();
  const Eigen::MatrixXd& m = km.m;
  const auto n = m.rows();
  auto classes = communicating_classes(m);
  if (classes.size() != 1) throw ReducibleChainError(std::move(classes), 0);
  if (const auto per = period(m); per != 1) throw ReducibleChainError(std::move(classes), per);

  Eigen::VectorXd g = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  Eigen::VectorXd h = g;
  const Eigen::MatrixXd mt = m.transpose();
  EigenTriplet out;
  out.horizon = km.horizon;
  for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
    Eigen::VectorXd g2 = mt * g;
    Eigen::VectorXd h2 = m * h;
    const double gs = g2.sum();
    const double hs = h2.sum();
    if (!(gs > 0.0) || !(hs > 0.0)) throw ExtinctionUnderflowError("power iteration lost all mass");
    g2 /= gs;
    h2 /= hs;
    const double diff = 0.5 * std::max((g2 - g).lpNorm<1>(), (h2 - h).lpNorm<1>());
    g = std::move(g2);
    h = std::move(h2);
    out.iterations = it;
    if (diff < opts.tolerance) {
      out.converged = true;
      break;
    }
  }
  const Eigen::VectorXd gm = mt * g;
  const double rho = gm.sum();
  out.theta = -std::log(rho) / km.horizon;
  h /= g.dot(h);
  out.gamma_left = g;
  out.h = h;
  out.left_residual = (gm - rho * g).lpNorm<1>() / (rho * g.lpNorm<1>());
  out.right_residual = (m * h - rho * h).lpNorm<1>() / (rho * h.lpNorm<1>());
  return out;
}

EigenTriplet perron_triplet_generator(const FiniteKilledChain& chain, const PowerIterationOptions& opts) {
  chain.validate();
  const auto n = static_cast<Eigen::Index>(chain.n_states());
  auto classes = communicating_classes(chain.jump_rates);
  if (classes.size() != 1) throw ReducibleChainError(std::move(classes), 0);

  const Eigen::MatrixXd a = chain.generator();
  const double scale = std::max(chain.max_outflow(), 1e-300);
  const double shift = 1e-6 * scale;
  Eigen::MatrixXd b = -a;
  b.diagonal().array() += shift;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(b);
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu_t(b.transpose());

  Eigen::VectorXd g = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  Eigen::VectorXd h = g;
  EigenTriplet out;
  out.horizon = 1.0;
  const std::size_t cap = std::min<std::size_t>(opts.max_iterations, 5000);
  for (std::size_t it = 1; it <= cap; ++it) {
    Eigen::VectorXd g2 = lu_t.solve(g).cwiseMax(0.0);
    Eigen::VectorXd h2 = lu.solve(h).cwiseMax(0.0);
    g2 /= g2.sum();
    h2 /= h2.sum();
    const double diff = 0.5 * std::max((g2 - g).lpNorm<1>(), (h2 - h).lpNorm<1>());
    g = std::move(g2);
    h = std::move(h2);
    out.iterations = it;
    if (diff < std::max(opts.tolerance, 1e-14)) {
      out.converged = true;
      break;
    }
  }
  // Q has zero row sums, so g A 1 = -g . kill_rates.
  out.theta = g.dot(chain.kill_rates) / g.sum();
  h /= g.dot(h);
  out.gamma_left = g;
  out.h = h;
  out.left_residual = (a.transpose() * g + out.theta * g).lpNorm<1>() / (scale * g.lpNorm<1>());
  out.right_residual = (a * h + out.theta * h).lpNorm<1>() / (scale * h.lpNorm<1>());
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ClassQsd> class_qsds(const KilledSemigroupMatrix& km) {
  km.validate();
  const Eigen::MatrixXd& m = km.m;
  const auto classes = communicating_classes(m);
  const std::size_t nc = classes.size();
  const auto n = static_cast<std::size_t>(m.rows());
  std::vector<std::size_t> class_of(n);
  for (std::size_t c = 0; c < nc; ++c)
    for (auto s : classes[c]) class_of[s] = c;

  // Per-class Perron root and left vector.
  std::vector<double> rho(nc);
  std::vector<Eigen::VectorXd> left(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    const auto& cs = classes[c];
    const auto k = static_cast<Eigen::Index>(cs.size());
    Eigen::MatrixXd block(k, k);
    for (Eigen::Index i = 0; i < k; ++i)
      for (Eigen::Index j = 0; j < k; ++j)
        block(i, j) = m(static_cast<Eigen::Index>(cs[i]), static_cast<Eigen::Index>(cs[j]));
    if (k == 1) {
      rho[c] = block(0, 0);
      left[c] = Eigen::VectorXd::Ones(1);
    } else {
      const auto t = perron_triplet({block, km.horizon});
      rho[c] = std::exp(-t.theta * km.horizon);
      left[c] = t.gamma_left;
    }
  }

  // Class-level reachability.
  std::vector<std::vector<bool>> reach(nc, std::vector<bool>(nc, false));
  for (std::size_t c = nc; c-- > 0;) {
    reach[c][c] = true;
    for (auto s : classes[c])
      for (std::size_t j = 0; j < n; ++j)
        if (m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) > 0.0 && class_of[j] != c)
          for (std::size_t d = 0; d < nc; ++d)
            if (reach[class_of[j]][d]) reach[c][d] = true;
  }

  std::vector<ClassQsd> out(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    out[c].states = classes[c];
    out[c].theta = rho[c] > 0.0 ? -std::log(rho[c]) / km.horizon : std::numeric_limits<double>::infinity();
    std::vector<std::size_t> down;
    std::size_t blocking = nc;
    for (std::size_t d = 0; d < nc; ++d) {
      if (d == c || !reach[c][d]) continue;
      if (rho[d] >= rho[c] * (1.0 - 1e-12)) blocking = d;
      for (auto s : classes[d]) down.push_back(s);
    }
    if (blocking != nc) {
      out[c].note = fmt::format("downstream class {} decays no faster (theta {} <= {})", blocking,
                                -std::log(rho[blocking]) / km.horizon, out[c].theta);
      continue;
    }
    Eigen::VectorXd full = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < classes[c].size(); ++i)
      full(static_cast<Eigen::Index>(classes[c][i])) = left[c](static_cast<Eigen::Index>(i));
    if (!down.empty()) {
      std::sort(down.begin(), down.end());
      const auto kd = static_cast<Eigen::Index>(down.size());
      const auto kc = static_cast<Eigen::Index>(classes[c].size());
      Eigen::MatrixXd mdd(kd, kd);
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(kd);
      for (Eigen::Index i = 0; i < kd; ++i) {
        for (Eigen::Index j = 0; j < kd; ++j)
          mdd(i, j) = m(static_cast<Eigen::Index>(down[i]), static_cast<Eigen::Index>(down[j]));
        for (Eigen::Index k = 0; k < kc; ++k)
          rhs(i) += left[c](k) * m(static_cast<Eigen::Index>(classes[c][k]), static_cast<Eigen::Index>(down[i]));
      }
      // gamma_D (rho I - M_DD) = gamma_C M_CD
      Eigen::MatrixXd sys = -mdd.transpose();
      sys.diagonal().array() += rho[c];
      const Eigen::VectorXd gd = sys.partialPivLu().solve(rhs).cwiseMax(0.0);
      for (Eigen::Index i = 0; i < kd; ++i) full(static_cast<Eigen::Index>(down[i])) = gd(i);
    }
    full /= full.sum();
    out[c].qsd = full;
    out[c].note = down.empty() ? "class carries its own QSD" : "class QSD extended to downstream states";
  }
  return out;
}

std::optional<std::size_t> attracting_class(const KilledSemigroupMatrix& km, const std::vector<ClassQsd>& qsds,
                                            const Eigen::VectorXd& eta0) {
  require_probability(eta0, km.size(), "attracting_class");
  const auto n = km.size();
  std::vector<std::size_t> class_of(n);
  for (std::size_t c = 0; c < qsds.size(); ++c)
    for (auto s : qsds[c].states) class_of[s] = c;
  // States reachable from the support of eta0.
  std::vector<bool> seen(n, false);
  std::queue<std::size_t> q;
  for (std::size_t i = 0; i < n; ++i)
    if (eta0(static_cast<Eigen::Index>(i)) > 0.0) {
      seen[i] = true;
      q.push(i);
    }
  while (!q.empty()) {
    const auto u = q.front();
    q.pop();
    for (std::size_t v = 0; v < n; ++v)
      if (!seen[v] && km.m(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) > 0.0) {
        seen[v] = true;
        q.push(v);
      }
  }
  std::optional<std::size_t> best;
  bool tie = false;
  for (std::size_t c = 0; c < qsds.size(); ++c) {
    if (!seen[qsds[c].states.front()]) continue;
    if (!best || qsds[c].theta < qsds[*best].theta - 1e-12 * std::max(1.0, qsds[c].theta)) {
      best = c;
      tie = false;
    } else if (std::abs(qsds[c].theta - qsds[*best].theta) <= 1e-12 * std::max(1.0, qsds[c].theta)) {
      tie = true;
    }
  }
  if (!best || tie || !qsds[*best].qsd) return std::nullopt;
  return best;
}

std::vector<double> survival_curve(const KilledSemigroupMatrix& km, const Eigen::VectorXd& eta0, std::size_t n) {
  require_probability(eta0, km.size(), "survival_curve");
  if (n < 1) throw InputError("survival_curve needs n >= 1");
  std::vector<double> out;
  out.reserve(n);
  const Eigen::MatrixXd mt = km.m.transpose();
  Eigen::VectorXd eta = eta0;
  for (std::size_t k = 0; k < n; ++k) {
    eta = mt * eta;
    out.push_back(eta.sum());
  }
  return out;
}

LeadingRates leading_rates(const KilledSemigroupMatrix& km) {
  km.validate();
  const Eigen::EigenSolver<Eigen::MatrixXd> es(km.m, false);
  std::vector<double> mods;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) mods.push_back(std::abs(es.eigenvalues()(i)));
  std::sort(mods.begin(), mods.end(), std::greater<>());
  LeadingRates r;
  r.theta1 = -std::log(mods[0]) / km.horizon;
  r.theta2 = mods.size() > 1 && mods[1] > 0.0 ? -std::log(mods[1]) / km.horizon
                                                : std::numeric_limits<double>::infinity();
  return r;
}

// ---------------------------------------------------------------------------

std::vector<double> midpoint_grid(std::size_t n_grid) {
  std::vector<double> x(n_grid);
  for (std::size_t i = 0; i < n_grid; ++i) x[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(n_grid);
  return x;
}

FiniteKilledChain grid_generator(const Preset& preset, std::size_t n_grid) {
  validate_preset(preset);
  if (n_grid < 16) throw InputError("grid_generator needs n_grid >= 16");
  const auto n = static_cast<Eigen::Index>(n_grid);
  FiniteKilledChain chain;
  chain.jump_rates = Eigen::MatrixXd::Zero(n, n);
  chain.kill_rates = Eigen::VectorXd::Zero(n);

  if (const auto* td = std::get_if<presets::TorusDiffusion>(&preset)) {
    if (td->dim != 1) throw UnsupportedModelError("grid_generator supports the torus only in dimension 1");
    const double h = 1.0 / static_cast<double>(n_grid);
    chain.coordinates = midpoint_grid(n_grid);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double x = chain.coordinates[static_cast<std::size_t>(i)];
      const double b = td->drift_amp * std::sin(kTwoPi * x);
      const double diff = 0.5 / (h * h);
      chain.jump_rates(i, (i + 1) % n) += diff + std::max(b, 0.0) / h;
      chain.jump_rates(i, (i + n - 1) % n) += diff + std::max(-b, 0.0) / h;
      chain.kill_rates(i) = td->kill_base + td->kill_amp * std::cos(kTwoPi * x);
    }
    return chain;
  }
  if (std::holds_alternative<presets::IntervalBrownian>(preset)) {
    const double h = 1.0 / static_cast<double>(n_grid + 1);
    const double diff = 0.5 / (h * h);
    chain.coordinates.resize(n_grid);
    for (Eigen::Index i = 0; i < n; ++i) {
      chain.coordinates[static_cast<std::size_t>(i)] = static_cast<double>(i + 1) * h;
      if (i > 0) chain.jump_rates(i, i - 1) = diff;
      else chain.kill_rates(i) += diff;
      if (i + 1 < n) chain.jump_rates(i, i + 1) = diff;
      else chain.kill_rates(i) += diff;
    }
    return chain;
  }
  if (const auto* hc = std::get_if<presets::HouseOfCard>(&preset)) {
    chain.coordinates = midpoint_grid(n_grid);
    const double rate = 1.0 / static_cast<double>(n_grid);
    chain.jump_rates.setConstant(rate);
    chain.jump_rates.diagonal().setZero();
    for (Eigen::Index i = 0; i < n; ++i)
      chain.kill_rates(i) = hc->c * std::pow(chain.coordinates[static_cast<std::size_t>(i)], hc->q);
    return chain;
  }
  throw UnsupportedModelError(fmt::format("grid_generator does not support preset {}", preset_name(preset)));
}

namespace {

// Fills row i of the discrete-time step kernel.
void fill_kernel_row(const Preset& preset, double gamma, std::size_t n_grid, const std::vector<double>& x,
                     const std::vector<double>& survive, Eigen::MatrixXd& p, Eigen::Index i) {
  const auto n = static_cast<Eigen::Index>(n_grid);
  const double xi = x[static_cast<std::size_t>(i)];
  if (const auto* hc = std::get_if<presets::HouseOfCard>(&preset)) {
    (void)hc;
    const double stay = std::exp(-gamma);
    const double redraw = (1.0 - stay) / static_cast<double>(n_grid);
    for (Eigen::Index j = 0; j < n; ++j)
      p(i, j) = ((i == j ? stay : 0.0) + redraw) * survive[static_cast<std::size_t>(j)];
    return;
  }
  const double sd = std::sqrt(gamma);
  double mean = xi;
  bool wrap = true;
  if (const auto* td = std::get_if<presets::TorusDiffusion>(&preset)) {
    mean += gamma * td->drift_amp * std::sin(kTwoPi * xi);
  } else {
    wrap = false;
  }
  const double inv_n = 1.0 / static_cast<double>(n_grid);
  long k_lo = 0, k_hi = 0;
  if (wrap) {
    k_lo = static_cast<long>(std::floor(mean - 10.0 * sd)) - 1;
    k_hi = static_cast<long>(std::ceil(mean + 10.0 * sd)) + 1;
  }
  for (Eigen::Index j = 0; j < n; ++j) p(i, j) = 0.0;
  for (long k = k_lo; k <= k_hi; ++k) {
    double prev = normal_cdf((static_cast<double>(k) - mean) / sd);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double edge = static_cast<double>(k) + static_cast<double>(j + 1) * inv_n;
      const double cur = normal_cdf((edge - mean) / sd);
      p(i, j) += cur - prev;
      prev = cur;
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) p(i, j) *= survive[static_cast<std::size_t>(j)];
}

KilledSemigroupMatrix build_step_kernel(const Preset& preset, double gamma, std::size_t n_grid, bool parallel) {
  validate_preset(preset);
  if (!(gamma > 0.0)) throw InputError("step kernel needs gamma > 0");
  if (n_grid < 16) throw InputError("step kernel needs n_grid >= 16");
  const auto x = midpoint_grid(n_grid);
  std::vector<double> survive(n_grid, 1.0);
  if (const auto* td = std::get_if<presets::TorusDiffusion>(&preset)) {
    if (td->dim != 1) throw UnsupportedModelError("step kernel supports the torus only in dimension 1");
    for (std::size_t j = 0; j < n_grid; ++j)
      survive[j] = std::exp(-gamma * (td->kill_base + td->kill_amp * std::cos(kTwoPi * x[j])));
  } else if (const auto* hc = std::get_if<presets::HouseOfCard>(&preset)) {
    for (std::size_t j = 0; j < n_grid; ++j) survive[j] = std::exp(-gamma * hc->c * std::pow(x[j], hc->q));
  } else if (!std::holds_alternative<presets::IntervalBrownian>(preset)) {
    throw UnsupportedModelError(fmt::format("step kernel does not support preset {}", preset_name(preset)));
  }
  const auto n = static_cast<Eigen::Index>(n_grid);
  Eigen::MatrixXd p(n, n);
#pragma omp parallel for schedule(static) if (parallel)
  for (Eigen::Index i = 0; i < n; ++i) fill_kernel_row(preset, gamma, n_grid, x, survive, p, i);
  return {p.cwiseMax(0.0), gamma};
}

}  // namespace

KilledSemigroupMatrix grid_step_kernel(const Preset& preset, double gamma, std::size_t n_grid) {
  return build_step_kernel(preset, gamma, n_grid, true);
}

KilledSemigroupMatrix grid_step_kernel_serial(const Preset& preset, double gamma, std::size_t n_grid) {
  return build_step_kernel(preset, gamma, n_grid, false);
}

}  // namespace qsdlab
