#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "qsdlab/random.hpp"

namespace qsdlab {

enum class Geometry { torus, interval, finite, half_line };

std::string to_string(Geometry g);

/// Discrete-time killed Markov model: one step proposes a move, then the
/// particle is killed with probability kill_prob(proposed point).
///
/// States are points of R^dim stored as doubles. Finite models use dim = 1 and
/// store the state index; index n_states is the cemetery (kill_prob = 1).
class KilledModel {
 public:
  virtual ~KilledModel() = default;

  virtual std::string name() const = 0;
  virtual Geometry geometry() const = 0;
  virtual std::size_t dim() const = 0;

  /// Draw from K^gamma(x, .). `out` must have dim() entries.
  virtual void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const = 0;

  /// Kill probability evaluated at a proposed point. Total on R^dim.
  virtual double kill_prob(std::span<const double> x) const = 0;

  /// True if kill_prob only takes the values 0 and 1.
  virtual bool hard_kill() const { return false; }

  /// Largest step size for which the model is declared valid, if any.
  virtual std::optional<double> max_step_size() const { return std::nullopt; }

  /// Membership in the live state space.
  virtual bool in_state_space(std::span<const double> x) const = 0;

  double step_size() const { return gamma_; }

 protected:
  explicit KilledModel(double gamma);

 private:
  double gamma_;
};

/// 1 - exp(-gamma * rate), accurate for small arguments.
double soft_kill_probability(double rate, double gamma);

using VectorField = std::function<void(std::span<const double>, std::span<double>)>;
using ScalarField = std::function<double(std::span<const double>)>;

/// Euler-Maruyama step of dX = b(X) dt + dB on the unit torus with soft
/// killing rate lambda, or on the open unit cube with hard killing at exit.
class DiffusionModel final : public KilledModel {
 public:
  /// Soft-killed diffusion on the d-torus.
  static DiffusionModel torus(std::size_t dim, double gamma, VectorField drift, ScalarField kill_rate,
                              std::string name = "torus_diffusion");
  /// Diffusion on (0,1)^d, killed when a proposal leaves the open cube.
  static DiffusionModel interval(std::size_t dim, double gamma, VectorField drift,
                                 std::string name = "interval_brownian");

  std::string name() const override { return name_; }
  Geometry geometry() const override { return geometry_; }
  std::size_t dim() const override { return dim_; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const override;
  double kill_prob(std::span<const double> x) const override;
  bool hard_kill() const override { return geometry_ == Geometry::interval; }
  bool in_state_space(std::span<const double> x) const override;

  /// Kill rate lambda(x); zero for the hard-killed variant.
  double kill_rate(std::span<const double> x) const;

 private:
  DiffusionModel(Geometry g, std::size_t dim, double gamma, VectorField drift, ScalarField kill_rate,
                 std::string name);

  Geometry geometry_;
  std::size_t dim_;
  VectorField drift_;
  ScalarField kill_rate_;
  std::string name_;
};

/// Redrawn uniformly on [0,1] at rate 1, soft-killed at rate c x^q. Over a
/// step of length gamma at least one redraw happens with probability
/// 1 - exp(-gamma), and the outcome is then uniform.
class HouseOfCardModel final : public KilledModel {
 public:
  HouseOfCardModel(double c, double q, double gamma);

  std::string name() const override { return "house_of_card"; }
  Geometry geometry() const override { return Geometry::interval; }
  std::size_t dim() const override { return 1; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const override;
  double kill_prob(std::span<const double> x) const override;
  bool in_state_space(std::span<const double> x) const override;

 private:
  double c_;
  double q_;
};

/// Deterministic rotation X -> X + gamma mod 1 with soft killing
/// lambda(x) = base + amp cos(2 pi x).
class PeriodicShiftModel final : public KilledModel {
 public:
  PeriodicShiftModel(double gamma, double kill_base, double kill_amp);

  std::string name() const override { return "periodic_shift"; }
  Geometry geometry() const override { return Geometry::torus; }
  std::size_t dim() const override { return 1; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const override;
  double kill_prob(std::span<const double> x) const override;
  bool in_state_space(std::span<const double> x) const override;

 private:
  double kill_base_;
  double kill_amp_;
};

/// Exponential growth at rate alpha with multiplicative jumps x -> r x at
/// constant rate B, soft-killed at constant rate lambda. Growth and jumps
/// commute, so a step is sampled exactly.
class GrowthFragModel final : public KilledModel {
 public:
  GrowthFragModel(double alpha, double r, double jump_rate, double kill_rate, double gamma);

  std::string name() const override { return "growth_frag"; }
  Geometry geometry() const override { return Geometry::half_line; }
  std::size_t dim() const override { return 1; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const override;
  double kill_prob(std::span<const double> x) const override;
  bool in_state_space(std::span<const double> x) const override;

  double alpha() const { return alpha_; }
  double ratio() const { return r_; }

 private:
  double alpha_;
  double r_;
  double jump_rate_;
  double kill_rate_;
};

/// Generator data of a finite killed chain.
struct FiniteKilledChain {
  Eigen::MatrixXd jump_rates;  ///< off-diagonal rates, zero diagonal
  Eigen::VectorXd kill_rates;
  std::vector<std::string> labels;
  /// Optional coordinate of each state (grid position, integer level).
  std::vector<double> coordinates;

  std::size_t n_states() const { return static_cast<std::size_t>(kill_rates.size()); }

  /// Throws InputError unless rates are finite, nonnegative, diagonal zero.
  void validate() const;

  /// A = Q - diag(kill_rates), Q conservative.
  Eigen::MatrixXd generator() const;

  /// Largest total outflow (jumps + killing) over states.
  double max_outflow() const;

  /// Coordinate of state i (falls back to i).
  double coordinate(std::size_t i) const;
};

/// Exact uniformized sampling of a finite chain over a step of length gamma.
/// Sub-steps of I + A / Lambda may move, stay, or land in the cemetery.
class FiniteChainModel final : public KilledModel {
 public:
  FiniteChainModel(FiniteKilledChain chain, double gamma, std::string name = "finite_chain");

  std::string name() const override { return name_; }
  Geometry geometry() const override { return Geometry::finite; }
  std::size_t dim() const override { return 1; }
  void propose(std::span<const double> x, std::span<double> out, RandomSource& rng) const override;
  double kill_prob(std::span<const double> x) const override;
  bool hard_kill() const override { return true; }
  bool in_state_space(std::span<const double> x) const override;

  const FiniteKilledChain& chain() const { return chain_; }
  std::size_t cemetery() const { return chain_.n_states(); }

 private:
  std::size_t substep(std::size_t state, double u) const;

  FiniteKilledChain chain_;
  std::string name_;
  double uniform_rate_;
  // Row-wise cumulative sub-step distribution over states 0..n (n = cemetery).
  std::vector<std::vector<double>> cumulative_;
};

// ---------------------------------------------------------------------------
// Presets

namespace presets {

/// Two live states. Index 0 ("1") is killed at rate b; index 1 ("2") jumps to
/// index 0 at rate a and is never killed directly.
struct TwoPoint {
  double a = 1.0;
  double b = 2.0;
};

/// Uniform redraw at rate 1, kill rate c x^q on [0,1].
struct HouseOfCard {
  double c = 1.0;
  double q = 1.0;
};

/// Birth-death chain on {1..truncation}: up at rate b and down at rate d from
/// n >= 2; from 1, up at rate b1 and killed at rate d1. The upward move out of
/// the top state is a kill (escape through the truncation).
struct BirthDeath {
  double b = 4.0;
  double d = 1.0;
  double b1 = 1.0;
  double d1 = 0.1;
  std::size_t truncation = 200;
};

struct PeriodicShift {
  double kill_base = 1.0;
  double kill_amp = 0.5;
};

struct GrowthFrag {
  double alpha = 1.0;
  double r = 0.5;
  double jump_rate = 2.0;
  double kill_rate = 0.5;
};

/// Drift b_i(x) = drift_amp sin(2 pi x_i); kill rate
/// lambda(x) = kill_base + kill_amp * mean_i cos(2 pi x_i).
struct TorusDiffusion {
  std::size_t dim = 1;
  double drift_amp = 1.0;
  double kill_base = 1.0;
  double kill_amp = 1.0;
};

/// Brownian motion on (0,1), hard-killed at the boundary.
struct IntervalBrownian {};

}  // namespace presets

using Preset = std::variant<presets::TwoPoint, presets::HouseOfCard, presets::BirthDeath,
                            presets::PeriodicShift, presets::GrowthFrag, presets::TorusDiffusion,
                            presets::IntervalBrownian>;

std::string preset_name(const Preset& p);

/// Throws InputError when parameters violate positivity constraints.
void validate_preset(const Preset& p);

/// Discrete-time model with step gamma.
std::unique_ptr<KilledModel> make_model(const Preset& p, double gamma);

/// Generator data for presets that are finite chains (two_point, birth_death).
std::optional<FiniteKilledChain> finite_chain(const Preset& p);

// ---------------------------------------------------------------------------
// Closed-form quasi-stationary distributions

/// Probability measure written as atoms plus an optional density on [lo, hi].
struct ClosedFormMeasure {
  std::string label;
  double theta = 0.0;  ///< extinction rate per unit time
  std::vector<std::pair<double, double>> atoms;  ///< (location, weight)
  std::function<double(double)> density;
  double lo = 0.0;
  double hi = 1.0;

  double atom_mass() const;
};

struct AnalyticQsd {
  std::string regime;
  std::vector<ClosedFormMeasure> qsds;
};

/// Known QSDs of a preset, or nullopt when only the spectral oracle applies.
/// Atom locations for finite chains are state indices.
std::optional<AnalyticQsd> analytic_qsd(const Preset& p);

/// Root of  int_0^1 dx / (1 + c x^q - theta) = 1  on [0, 1).
double house_of_card_theta(double c, double q);

}  // namespace qsdlab
