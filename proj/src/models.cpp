#include "qsdlab/models.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "qsdlab/errors.hpp"

namespace qsdlab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_unit(double v) {
  double r = v - std::floor(v);
  // v slightly below an integer can round up to exactly 1.
  if (r >= 1.0) r = 0.0;
  return r;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

}  // namespace

std::string to_string(Geometry g) {
  switch (g) {
    case Geometry::torus: return "torus";
    case Geometry::interval: return "interval";
    case Geometry::finite: return "finite";
    case Geometry::half_line: return "half_line";
  }
  return "unknown";
}

KilledModel::KilledModel(double gamma) : gamma_(gamma) {
  require(std::isfinite(gamma) && gamma > 0.0, "step size gamma must be positive and finite");
}

double soft_kill_probability(double rate, double gamma) {
  if (!(rate > 0.0)) return 0.0;
  return -std::expm1(-gamma * rate);
}

// ---------------------------------------------------------------------------

DiffusionModel::DiffusionModel(Geometry g, std::size_t dim, double gamma, VectorField drift,
                               ScalarField kill_rate, std::string name)
    : KilledModel(gamma),
      geometry_(g),
      dim_(dim),
      drift_(std::move(drift)),
      kill_rate_(std::move(kill_rate)),
      name_(std::move(name)) {
  require(dim_ >= 1, "diffusion dimension must be at least 1");
}

DiffusionModel DiffusionModel::torus(std::size_t dim, double gamma, VectorField drift,
                                     ScalarField kill_rate, std::string name) {
  return DiffusionModel(Geometry::torus, dim, gamma, std::move(drift), std::move(kill_rate),
                        std::move(name));
}

DiffusionModel DiffusionModel::interval(std::size_t dim, double gamma, VectorField drift,
                                        std::string name) {
  return DiffusionModel(Geometry::interval, dim, gamma, std::move(drift), nullptr, std::move(name));
}

void DiffusionModel::propose(std::span<const double> x, std::span<double> out,
                             RandomSource& rng) const {
  const double gamma = step_size();
  const double sd = std::sqrt(gamma);
  if (drift_) {
    drift_(x, out);
    for (std::size_t k = 0; k < dim_; ++k) {
      if (!std::isfinite(out[k]))
        throw ModelEvaluationError(fmt::format("{}: non-finite drift at coordinate {}", name_, k));
    }
  } else {
    std::fill(out.begin(), out.end(), 0.0);
  }
  for (std::size_t k = 0; k < dim_; ++k) out[k] = x[k] + gamma * out[k] + sd * rng.normal();
  if (geometry_ == Geometry::torus)
    for (std::size_t k = 0; k < dim_; ++k) out[k] = wrap_unit(out[k]);
}

double DiffusionModel::kill_rate(std::span<const double> x) const {
  if (geometry_ == Geometry::interval || !kill_rate_) return 0.0;
  return kill_rate_(x);
}

double DiffusionModel::kill_prob(std::span<const double> x) const {
  if (geometry_ == Geometry::interval) {
    for (std::size_t k = 0; k < dim_; ++k)
      if (!(x[k] > 0.0 && x[k] < 1.0)) return 1.0;
    return 0.0;
  }
  return soft_kill_probability(kill_rate(x), step_size());
}

bool DiffusionModel::in_state_space(std::span<const double> x) const {
  if (x.size() != dim_) return false;
  for (double v : x) {
    if (geometry_ == Geometry::torus && !(v >= 0.0 && v < 1.0)) return false;
    if (geometry_ == Geometry::interval && !(v > 0.0 && v < 1.0)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

HouseOfCardModel::HouseOfCardModel(double c, double q, double gamma) : KilledModel(gamma), c_(c), q_(q) {
  require(c >= 0.0 && q >= 0.0 && std::isfinite(c) && std::isfinite(q),
          "house_of_card requires c >= 0 and q >= 0");
}

void HouseOfCardModel::propose(std::span<const double> x, std::span<double> out,
                               RandomSource& rng) const {
  const double redraw = -std::expm1(-step_size());
  const double u = rng.uniform();
  out[0] = u < redraw ? rng.uniform() : x[0];
}

double HouseOfCardModel::kill_prob(std::span<const double> x) const {
  const double v = std::clamp(x[0], 0.0, 1.0);
  return soft_kill_probability(c_ * std::pow(v, q_), step_size());
}

bool HouseOfCardModel::in_state_space(std::span<const double> x) const {
  return x.size() == 1 && x[0] >= 0.0 && x[0] <= 1.0;
}

// ---------------------------------------------------------------------------

PeriodicShiftModel::PeriodicShiftModel(double gamma, double kill_base, double kill_amp)
    : KilledModel(gamma), kill_base_(kill_base), kill_amp_(kill_amp) {
  require(kill_base >= std::abs(kill_amp), "periodic_shift requires kill_base >= |kill_amp|");
}

void PeriodicShiftModel::propose(std::span<const double> x, std::span<double> out,
                                 RandomSource&) const {
  out[0] = wrap_unit(x[0] + step_size());
}

double PeriodicShiftModel::kill_prob(std::span<const double> x) const {
  return soft_kill_probability(kill_base_ + kill_amp_ * std::cos(kTwoPi * x[0]), step_size());
}

bool PeriodicShiftModel::in_state_space(std::span<const double> x) const {
  return x.size() == 1 && x[0] >= 0.0 && x[0] < 1.0;
}

// ---------------------------------------------------------------------------

GrowthFragModel::GrowthFragModel(double alpha, double r, double jump_rate, double kill_rate,
                                 double gamma)
    : KilledModel(gamma), alpha_(alpha), r_(r), jump_rate_(jump_rate), kill_rate_(kill_rate) {
  require(alpha > 0.0, "growth_frag requires alpha > 0");
  require(r > 0.0 && r < 1.0, "growth_frag requires 0 < r < 1");
  require(jump_rate > 0.0, "growth_frag requires jump rate B > 0");
  require(kill_rate >= 0.0, "growth_frag requires kill rate >= 0");
}

void GrowthFragModel::propose(std::span<const double> x, std::span<double> out,
                              RandomSource& rng) const {
  const auto jumps = rng.poisson(jump_rate_ * step_size());
  out[0] = x[0] * std::exp(alpha_ * step_size()) * std::pow(r_, static_cast<double>(jumps));
}

double GrowthFragModel::kill_prob(std::span<const double>) const {
  return soft_kill_probability(kill_rate_, step_size());
}

bool GrowthFragModel::in_state_space(std::span<const double> x) const {
  return x.size() == 1 && x[0] > 0.0 && std::isfinite(x[0]);
}

// ---------------------------------------------------------------------------

void FiniteKilledChain::validate() const {
  const auto n = kill_rates.size();
  require(n >= 1, "finite chain needs at least one state");
  require(jump_rates.rows() == n && jump_rates.cols() == n, "jump rate matrix must be n x n");
  for (Eigen::Index i = 0; i < n; ++i) {
    require(std::isfinite(kill_rates(i)) && kill_rates(i) >= 0.0,
            fmt::format("kill rate of state {} must be finite and nonnegative", i));
    require(jump_rates(i, i) == 0.0, fmt::format("jump rate diagonal must be zero (state {})", i));
    for (Eigen::Index j = 0; j < n; ++j)
      require(std::isfinite(jump_rates(i, j)) && jump_rates(i, j) >= 0.0,
              fmt::format("jump rate ({},{}) must be finite and nonnegative", i, j));
  }
  require(labels.empty() || labels.size() == static_cast<std::size_t>(n), "label count mismatch");
  require(coordinates.empty() || coordinates.size() == static_cast<std::size_t>(n),
          "coordinate count mismatch");
}

Eigen::MatrixXd FiniteKilledChain::generator() const {
  Eigen::MatrixXd a = jump_rates;
  const Eigen::VectorXd out = jump_rates.rowwise().sum();
  for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, i) = -out(i) - kill_rates(i);
  return a;
}

double FiniteKilledChain::max_outflow() const {
  return (jump_rates.rowwise().sum() + kill_rates).maxCoeff();
}

double FiniteKilledChain::coordinate(std::size_t i) const {
  return coordinates.empty() ? static_cast<double>(i) : coordinates[i];
}

FiniteChainModel::FiniteChainModel(FiniteKilledChain chain, double gamma, std::string name)
    : KilledModel(gamma), chain_(std::move(chain)), name_(std::move(name)) {
  chain_.validate();
  const std::size_t n = chain_.n_states();
  uniform_rate_ = chain_.max_outflow();
  cumulative_.assign(n, std::vector<double>(n + 1, 0.0));
  if (uniform_rate_ <= 0.0) return;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    double out = 0.0;
    for (std::size_t j = 0; j < n; ++j) out += chain_.jump_rates(i, j);
    for (std::size_t j = 0; j < n; ++j) {
      const double p = (j == i) ? 1.0 - (out + chain_.kill_rates(i)) / uniform_rate_
                                : chain_.jump_rates(i, j) / uniform_rate_;
      acc += std::max(p, 0.0);
      cumulative_[i][j] = acc;
    }
    cumulative_[i][n] = 1.0;
  }
}

std::size_t FiniteChainModel::substep(std::size_t state, double u) const {
  const auto& row = cumulative_[state];
  const auto it = std::upper_bound(row.begin(), row.end(), u);
  return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - row.begin(), row.size() - 1));
}

void FiniteChainModel::propose(std::span<const double> x, std::span<double> out,
                               RandomSource& rng) const {
  const std::size_t n = chain_.n_states();
  auto state = static_cast<std::size_t>(x[0]);
  if (state >= n) throw InputError("finite chain proposal from outside the live state space");
  const auto count = rng.poisson(uniform_rate_ * step_size());
  for (std::uint64_t k = 0; k < count && state < n; ++k) state = substep(state, rng.uniform());
  out[0] = static_cast<double>(state);
}

double FiniteChainModel::kill_prob(std::span<const double> x) const {
  return in_state_space(x) ? 0.0 : 1.0;
}

bool FiniteChainModel::in_state_space(std::span<const double> x) const {
  if (x.size() != 1) return false;
  const double v = x[0];
  return v >= 0.0 && v < static_cast<double>(chain_.n_states()) && v == std::floor(v);
}

// ---------------------------------------------------------------------------

std::string preset_name(const Preset& p) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, presets::TwoPoint>) return "two_point";
        else if constexpr (std::is_same_v<T, presets::HouseOfCard>) return "house_of_card";
        else if constexpr (std::is_same_v<T, presets::BirthDeath>) return "birth_death";
        else if constexpr (std::is_same_v<T, presets::PeriodicShift>) return "periodic_shift";
        else if constexpr (std::is_same_v<T, presets::GrowthFrag>) return "growth_frag";
        else if constexpr (std::is_same_v<T, presets::TorusDiffusion>) return "torus_diffusion";
        else return "interval_brownian";
      },
      p);
}

void validate_preset(const Preset& p) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, presets::TwoPoint>) {
          require(v.a > 0.0 && v.b > 0.0 && std::isfinite(v.a) && std::isfinite(v.b),
                  "two_point requires a > 0 and b > 0");
        } else if constexpr (std::is_same_v<T, presets::HouseOfCard>) {
          require(v.c >= 0.0 && v.q >= 0.0 && std::isfinite(v.c) && std::isfinite(v.q),
                  "house_of_card requires c >= 0 and q >= 0");
        } else if constexpr (std::is_same_v<T, presets::BirthDeath>) {
          require(v.b > 0.0 && v.d > 0.0 && v.b1 > 0.0 && v.d1 >= 0.0,
                  "birth_death requires b, d, b1 > 0 and d1 >= 0");
          require(v.truncation >= 2, "birth_death truncation must be at least 2");
        } else if constexpr (std::is_same_v<T, presets::PeriodicShift>) {
          require(v.kill_base >= std::abs(v.kill_amp), "periodic_shift requires kill_base >= |kill_amp|");
        } else if constexpr (std::is_same_v<T, presets::GrowthFrag>) {
          require(v.alpha > 0.0 && v.r > 0.0 && v.r < 1.0 && v.jump_rate > 0.0 && v.kill_rate >= 0.0,
                  "growth_frag requires alpha > 0, 0 < r < 1, B > 0, lambda >= 0");
        } else if constexpr (std::is_same_v<T, presets::TorusDiffusion>) {
          require(v.dim >= 1, "torus_diffusion requires dim >= 1");
          require(std::isfinite(v.drift_amp), "torus_diffusion drift must be finite");
          require(std::isfinite(v.kill_base) && v.kill_base >= std::abs(v.kill_amp),
                  "torus_diffusion requires kill_base >= |kill_amp| (nonnegative kill rate)");
        }
      },
      p);
}

std::unique_ptr<KilledModel> make_model(const Preset& p, double gamma) {
  validate_preset(p);
  return std::visit(
      [gamma](const auto& v) -> std::unique_ptr<KilledModel> {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, presets::TwoPoint> || std::is_same_v<T, presets::BirthDeath>) {
          return std::make_unique<FiniteChainModel>(*finite_chain(Preset{v}), gamma,
                                                    preset_name(Preset{v}));
        } else if constexpr (std::is_same_v<T, presets::HouseOfCard>) {
          return std::make_unique<HouseOfCardModel>(v.c, v.q, gamma);
        } else if constexpr (std::is_same_v<T, presets::PeriodicShift>) {
          return std::make_unique<PeriodicShiftModel>(gamma, v.kill_base, v.kill_amp);
        } else if constexpr (std::is_same_v<T, presets::GrowthFrag>) {
          return std::make_unique<GrowthFragModel>(v.alpha, v.r, v.jump_rate, v.kill_rate, gamma);
        } else if constexpr (std::is_same_v<T, presets::TorusDiffusion>) {
          const double amp = v.drift_amp;
          const double base = v.kill_base;
          const double kamp = v.kill_amp;
          const auto dim = v.dim;
          VectorField drift = [amp](std::span<const double> x, std::span<double> out) {
            for (std::size_t k = 0; k < x.size(); ++k) out[k] = amp * std::sin(kTwoPi * x[k]);
          };
          ScalarField kill = [base, kamp, dim](std::span<const double> x) {
            double s = 0.0;
            for (double xk : x) s += std::cos(kTwoPi * xk);
            return base + kamp * s / static_cast<double>(dim);
          };
          return std::make_unique<DiffusionModel>(
              DiffusionModel::torus(dim, gamma, std::move(drift), std::move(kill)));
        } else {
          return std::make_unique<DiffusionModel>(DiffusionModel::interval(1, gamma, nullptr));
        }
      },
      p);
}

std::optional<FiniteKilledChain> finite_chain(const Preset& p) {
  validate_preset(p);
  if (const auto* tp = std::get_if<presets::TwoPoint>(&p)) {
    FiniteKilledChain c;
    c.jump_rates = Eigen::MatrixXd::Zero(2, 2);
    c.jump_rates(1, 0) = tp->a;
    c.kill_rates = Eigen::Vector2d(tp->b, 0.0);
    c.labels = {"1", "2"};
    return c;
  }
  if (const auto* bd = std::get_if<presets::BirthDeath>(&p)) {
    const auto n = static_cast<Eigen::Index>(bd->truncation);
    FiniteKilledChain c;
    c.jump_rates = Eigen::MatrixXd::Zero(n, n);
    c.kill_rates = Eigen::VectorXd::Zero(n);
    c.jump_rates(0, 1) = bd->b1;
    c.kill_rates(0) = bd->d1;
    for (Eigen::Index i = 1; i < n; ++i) {
      c.jump_rates(i, i - 1) = bd->d;
      if (i + 1 < n) c.jump_rates(i, i + 1) = bd->b;
    }
    c.kill_rates(n - 1) += bd->b;
    c.labels.reserve(n);
    c.coordinates.reserve(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      c.labels.push_back(std::to_string(i + 1));
      c.coordinates.push_back(static_cast<double>(i + 1));
    }
    return c;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

double ClosedFormMeasure::atom_mass() const {
  double s = 0.0;
  for (const auto& [loc, w] : atoms) s += w;
  return s;
}

double house_of_card_theta(double c, double q) {
  require(c >= 0.0 && q >= 0.0, "house_of_card requires c >= 0 and q >= 0");
  if (c == 0.0) return 0.0;
  require(q >= 1.0 || c * (1.0 - q) < 1.0, "house_of_card has no explicit QSD in this regime");
  using boost::math::quadrature::gauss_kronrod;
  auto excess = [c, q](double theta) {
    auto f = [c, q, theta](double x) { return 1.0 / (1.0 + c * std::pow(x, q) - theta); };
    return gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 20, 1e-14) - 1.0;
  };
  double hi = 1.0 - 1e-9;
  while (excess(hi) <= 0.0) hi = 1.0 - (1.0 - hi) * 1e-3;
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::toms748_solve(excess, 0.0, hi,
                                                   boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (r.first + r.second);
}

std::optional<AnalyticQsd> analytic_qsd(const Preset& p) {
  validate_preset(p);
  if (const auto* tp = std::get_if<presets::TwoPoint>(&p)) {
    const double a = tp->a;
    const double b = tp->b;
    AnalyticQsd out;
    ClosedFormMeasure dirac{"dirac_dying", b, {{0.0, 1.0}}, nullptr, 0.0, 1.0};
    if (b > a) {
      out.regime = "b>a: two QSDs, mixture attracting from the transient state";
      out.qsds.push_back({"mixture", a, {{0.0, a / b}, {1.0, (b - a) / b}}, nullptr, 0.0, 1.0});
      out.qsds.push_back(dirac);
    } else if (b < a) {
      out.regime = "b<a: unique QSD, exponential convergence";
      out.qsds.push_back(dirac);
    } else {
      out.regime = "b=a: unique QSD, slow convergence";
      out.qsds.push_back(dirac);
    }
    return out;
  }
  if (const auto* hc = std::get_if<presets::HouseOfCard>(&p)) {
    const double c = hc->c;
    const double q = hc->q;
    AnalyticQsd out;
    if (c == 0.0) {
      out.regime = "no killing: uniform invariant law";
      out.qsds.push_back({"uniform", 0.0, {}, [](double) { return 1.0; }, 0.0, 1.0});
      return out;
    }
    const double tail = q < 1.0 ? c * (1.0 - q) : 0.0;  // 1 / mass of x^{-q}/c
    if (q >= 1.0 || tail < 1.0) {
      const double theta = house_of_card_theta(c, q);
      out.regime = "q > 1 - 1/c: unique QSD with bounded density";
      out.qsds.push_back({"explicit", theta, {},
                          [c, q, theta](double x) { return 1.0 / (1.0 + c * std::pow(x, q) - theta); },
                          0.0, 1.0});
      return out;
    }
    auto power_density = [c, q](double x) { return x > 0.0 ? std::pow(x, -q) / c : 0.0; };
    if (tail == 1.0) {
      out.regime = "critical: two QSDs (density proportional to x^-q, and delta_0)";
      out.qsds.push_back({"power_density", 1.0, {}, power_density, 0.0, 1.0});
      out.qsds.push_back({"dirac_zero", 1.0, {{0.0, 1.0}}, nullptr, 0.0, 1.0});
    } else {
      out.regime = "degenerate: atom at 0 plus density proportional to x^-q";
      out.qsds.push_back({"degenerate", 1.0, {{0.0, 1.0 - 1.0 / tail}}, power_density, 0.0, 1.0});
    }
    return out;
  }
  if (std::holds_alternative<presets::IntervalBrownian>(p)) {
    AnalyticQsd out;
    out.regime = "Dirichlet ground state";
    out.qsds.push_back({"sine", std::numbers::pi * std::numbers::pi / 2.0, {},
                        [](double x) { return std::numbers::pi / 2.0 * std::sin(std::numbers::pi * x); },
                        0.0, 1.0});
    return out;
  }
  if (const auto* td = std::get_if<presets::TorusDiffusion>(&p)) {
    if (td->dim == 1 && td->drift_amp == 0.0 && td->kill_amp == 0.0) {
      AnalyticQsd out;
      out.regime = "constant kill rate, no drift: uniform";
      out.qsds.push_back({"uniform", td->kill_base, {}, [](double) { return 1.0; }, 0.0, 1.0});
      return out;
    }
  }
  return std::nullopt;
}

}  // namespace qsdlab
