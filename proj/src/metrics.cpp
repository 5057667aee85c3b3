#include "qsdlab/metrics.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"

namespace qsdlab {

void EmpiricalMeasure::validate() const {
  if (dim == 0 || support.empty() || support.size() % dim != 0)
    throw InputError("empirical measure needs a nonempty support");
  if (weights.size() != size()) throw InputError("empirical measure: weights and support differ in size");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("empirical measure: negative or non-finite weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InputError(fmt::format("empirical measure weights sum to {}", total));
  for (double x : support)
    if (!std::isfinite(x)) throw InputError("empirical measure: non-finite support point");
}

EmpiricalMeasure EmpiricalMeasure::uniform(Geometry g, std::size_t dim, std::vector<double> points) {
  EmpiricalMeasure m;
  m.geometry = g;
  m.dim = dim;
  m.support = std::move(points);
  const std::size_t n = m.size();
  if (n == 0) throw InputError("empirical measure needs a nonempty support");
  m.weights.assign(n, 1.0 / static_cast<double>(n));
  return m;
}

EmpiricalMeasure EmpiricalMeasure::weighted(Geometry g, std::size_t dim, std::vector<double> points,
                                            std::vector<double> weights) {
  EmpiricalMeasure m{g, dim, std::move(points), std::move(weights)};
  m.validate();
  return m;
}

EmpiricalMeasure from_snapshot(const FVReport& report, const Snapshot& snap) {
  return EmpiricalMeasure::uniform(report.geometry, report.dim, snap.states);
}

EmpiricalMeasure discretize(const ClosedFormMeasure& mu, std::size_t cells, Geometry g) {
  if (cells == 0) throw InputError("discretize needs at least one cell");
  std::vector<double> pts, w;
  for (const auto& [loc, mass] : mu.atoms) {
    pts.push_back(loc);
    w.push_back(mass);
  }
  if (mu.density) {
    const double width = (mu.hi - mu.lo) / static_cast<double>(cells);
    using boost::math::quadrature::gauss_kronrod;
    for (std::size_t i = 0; i < cells; ++i) {
      const double a = mu.lo + static_cast<double>(i) * width;
      const double b = a + width;
      const double mass = gauss_kronrod<double, 31>::integrate(mu.density, a, b, 8, 1e-12);
      pts.push_back(0.5 * (a + b));
      w.push_back(std::max(mass, 0.0));
    }
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) throw InputError(fmt::format("measure {} has no mass", mu.label));
  for (double& x : w) x /= total;
  return EmpiricalMeasure::weighted(g, 1, std::move(pts), std::move(w));
}

namespace {

struct Atom {
  double pos;
  double delta;  // mass of A minus mass of B
};

// Merged support of two 1-d measures with coincident points combined, sorted.
// Masses at a point are summed per measure before differencing, so swapping
// a and b negates every delta exactly.
std::vector<Atom> merged_difference(const EmpiricalMeasure& a, const EmpiricalMeasure& b, bool wrap) {
  a.validate();
  b.validate();
  if (a.dim != 1 || b.dim != 1) throw InputError("one-dimensional W1 needs dim = 1 measures");
  struct Raw {
    double pos, wa, wb;
  };
  std::vector<Raw> raw;
  raw.reserve(a.size() + b.size());
  auto reduce = [wrap](double x) {
    if (!wrap) return x;
    double r = x - std::floor(x);
    return r >= 1.0 ? 0.0 : r;
  };
  for (std::size_t i = 0; i < a.size(); ++i) raw.push_back({reduce(a.support[i]), a.weights[i], 0.0});
  for (std::size_t i = 0; i < b.size(); ++i) raw.push_back({reduce(b.support[i]), 0.0, b.weights[i]});
  std::sort(raw.begin(), raw.end(), [](const Raw& l, const Raw& r) {
    if (l.pos != r.pos) return l.pos < r.pos;
    if (l.wa != r.wa) return l.wa < r.wa;
    return l.wb < r.wb;
  });
  std::vector<Atom> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size();) {
    double wa = 0.0, wb = 0.0;
    const double pos = raw[i].pos;
    for (; i < raw.size() && raw[i].pos == pos; ++i) {
      wa += raw[i].wa;
      wb += raw[i].wb;
    }
    out.push_back({pos, wa - wb});
  }
  return out;
}

}  // namespace

double w1_circle(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.geometry != Geometry::torus || b.geometry != Geometry::torus)
    throw InputError("w1_circle needs measures on the torus");
  const auto atoms = merged_difference(a, b, true);
  const std::size_t m = atoms.size();
  if (m == 1) return 0.0;
  // Arc i runs from atom i to atom i+1 (the last one wraps around).
  std::vector<double> f(m), len(m);
  double cum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    cum += atoms[i].delta;
    f[i] = cum;
    len[i] = i + 1 < m ? atoms[i + 1].pos - atoms[i].pos : 1.0 - atoms[i].pos + atoms[0].pos;
  }
  // Weighted median of f with weights len; midpoint of the median interval.
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) { return f[l] < f[r]; });
  const double half = 0.5 * std::accumulate(len.begin(), len.end(), 0.0);
  double acc = 0.0;
  double shift = f[order.back()];
  for (std::size_t k = 0; k < m; ++k) {
    acc += len[order[k]];
    if (acc > half) {
      shift = f[order[k]];
      break;
    }
    if (acc == half) {
      shift = k + 1 < m ? 0.5 * (f[order[k]] + f[order[k + 1]]) : f[order[k]];
      break;
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) total += len[i] * std::abs(f[i] - shift);
  return total;
}

double w1_line(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.geometry == Geometry::torus || b.geometry == Geometry::torus)
    throw InputError("w1_line needs measures on a line");
  const auto atoms = merged_difference(a, b, false);
  double cum = 0.0, total = 0.0;
  for (std::size_t i = 0; i + 1 < atoms.size(); ++i) {
    cum += atoms[i].delta;
    total += std::abs(cum) * (atoms[i + 1].pos - atoms[i].pos);
  }
  return total;
}

double w1(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  if (a.geometry != b.geometry) throw InputError("W1 between measures of different geometry");
  if (a.geometry == Geometry::torus) return w1_circle(a, b);
  if (a.geometry == Geometry::finite) throw InputError("W1 is not defined here for finite state spaces; use TV");
  return w1_line(a, b);
}

Estimate sliced_w1_torus(const EmpiricalMeasure& a, const EmpiricalMeasure& b, std::size_t n_proj,
                         RandomSource& rng) {
  if (n_proj < 1) throw InputError("sliced W1 needs n_proj >= 1");
  if (a.geometry != Geometry::torus || b.geometry != Geometry::torus || a.dim != b.dim)
    throw InputError("sliced W1 needs two measures on the same torus");
  const std::size_t d = a.dim;
  if (d == 1) return {w1_circle(a, b), 0.0};

  auto project = [d](const EmpiricalMeasure& mu, const std::vector<long>& k) {
    std::vector<double> pts(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(k[j]) * mu.support[i * d + j];
      pts[i] = s - std::floor(s);
    }
    return EmpiricalMeasure{Geometry::torus, 1, std::move(pts), mu.weights};
  };

  std::vector<double> vals;
  vals.reserve(n_proj);
  std::vector<long> k(d);
  while (vals.size() < n_proj) {
    long g = 0;
    for (auto& kj : k) {
      kj = static_cast<long>(std::floor(rng.uniform() * 7.0)) - 3;
      g = std::gcd(g, std::abs(kj));
    }
    if (g != 1) continue;  // zero or non-primitive
    double norm = 0.0;
    for (auto kj : k) norm += static_cast<double>(kj * kj);
    vals.push_back(w1_circle(project(a, k), project(b, k)) / std::sqrt(norm));
  }
  const double n = static_cast<double>(vals.size());
  const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / n;
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  const double se = vals.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
  return {mean, se};
}

Estimate estimate_theta(const FVReport& report, std::size_t burn_in) {
  const auto& deaths = report.deaths_per_step;
  if (burn_in >= deaths.size()) throw InputError("estimate_theta: no steps after burn-in");
  const std::size_t steps = deaths.size() - burn_in;
  double sum = 0.0, sq = 0.0;
  for (std::size_t s = burn_in; s < deaths.size(); ++s) {
    const auto x = static_cast<double>(deaths[s]);
    sum += x;
    sq += x * x;
  }
  const double n = static_cast<double>(steps);
  const double scale = static_cast<double>(report.config.n_particles) * report.config.gamma;
  const double mean = sum / n;
  const double var = steps > 1 ? std::max(0.0, (sq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean / scale, std::sqrt(var / n) / scale};
}

namespace {

FitResult least_squares(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw InputError("fit needs at least two distinct abscissae");
  FitResult r;
  r.slope = sxy / sxx;
  r.intercept = my - r.slope * mx;
  const double ss_res = syy - r.slope * sxy;
  r.r2 = syy > 0.0 ? 1.0 - std::max(ss_res, 0.0) / syy : 1.0;
  return r;
}

void check_fit_input(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("fit: sequences differ in length");
  if (x.size() < 3) throw InputError("fit needs at least 3 points");
  for (double v : y)
    if (!(v > 0.0) || !std::isfinite(v)) throw InputError("fit: values must be positive and finite");
}

}  // namespace

FitResult fit_power_law(std::span<const double> xs, std::span<const double> ys) {
  check_fit_input(xs, ys);
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !std::isfinite(xs[i])) throw InputError("fit_power_law: abscissae must be positive");
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
  }
  return least_squares(lx, ly);
}

FitResult fit_exponential_rate(std::span<const double> ts, std::span<const double> ds) {
  check_fit_input(ts, ds);
  std::vector<double> ly;
  for (double d : ds) ly.push_back(std::log(d));
  return least_squares(ts, ly);
}

double tv_finite(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw InputError("tv_finite: size mismatch");
  return 0.5 * (a - b).lpNorm<1>();
}

double histogram_tv(std::span<const double> a, std::span<const double> b, double lo, double hi, std::size_t bins) {
  if (a.empty() || b.empty()) throw InputError("histogram_tv needs nonempty samples");
  if (!(hi > lo) || bins == 0) throw InputError("histogram_tv needs hi > lo and bins >= 1");
  auto hist = [&](std::span<const double> s) {
    Eigen::VectorXd h = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bins));
    for (double x : s) {
      auto k = static_cast<long>(std::floor((x - lo) / (hi - lo) * static_cast<double>(bins)));
      k = std::clamp<long>(k, 0, static_cast<long>(bins) - 1);
      h(k) += 1.0;
    }
    return Eigen::VectorXd(h / static_cast<double>(s.size()));
  };
  return tv_finite(hist(a), hist(b));
}

}  // namespace qsdlab
