#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

#include "qsdlab/fv_engine.hpp"
#include "qsdlab/models.hpp"
#include "qsdlab/random.hpp"

namespace qsdlab {

/// Weighted point cloud. `support` holds size() * dim coordinates.
struct EmpiricalMeasure {
  Geometry geometry = Geometry::torus;
  std::size_t dim = 1;
  std::vector<double> support;
  std::vector<double> weights;

  std::size_t size() const { return dim == 0 ? 0 : support.size() / dim; }

  /// Throws InputError unless the support is nonempty, weights are
  /// nonnegative and sum to 1 within 1e-12.
  void validate() const;

  static EmpiricalMeasure uniform(Geometry g, std::size_t dim, std::vector<double> points);
  static EmpiricalMeasure weighted(Geometry g, std::size_t dim, std::vector<double> points,
                                   std::vector<double> weights);
};

/// Empirical measure of an FV snapshot.
EmpiricalMeasure from_snapshot(const FVReport& report, const Snapshot& snap);

/// Cell masses of a closed-form measure on `cells` equal cells of [lo, hi],
/// placed at the cell midpoints; atoms are kept at their locations.
EmpiricalMeasure discretize(const ClosedFormMeasure& mu, std::size_t cells, Geometry g);

/// Exact W1 on the unit circle: the minimum over shifts s of the integral of
/// |F_A - F_B - s|, attained at a weighted median of the CDF difference.
double w1_circle(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

/// Exact W1 on the line: the integral of |F_A - F_B|.
double w1_line(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

/// Dispatches on geometry: circle for the 1-torus, line for interval and
/// half-line in dimension 1.
double w1(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Mean over n_proj random primitive lattice directions k of
/// w1_circle(k.x mod 1) / |k|. In dimension 1 the only direction is k = 1 and
/// the result is w1_circle with zero standard error.
Estimate sliced_w1_torus(const EmpiricalMeasure& a, const EmpiricalMeasure& b, std::size_t n_proj,
                         RandomSource& rng);

/// Death intensity after burn_in steps: deaths / (N * steps * gamma), with the
/// standard error from the per-step death-count variance.
Estimate estimate_theta(const FVReport& report, std::size_t burn_in);

struct FitResult {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Least squares of log y on log x.
FitResult fit_power_law(std::span<const double> xs, std::span<const double> ys);

/// Least squares of log d on t; the rate is -slope.
FitResult fit_exponential_rate(std::span<const double> ts, std::span<const double> ds);

/// Total variation on a common finite support.
double tv_finite(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// TV between the histograms of two samples over [lo, hi].
double histogram_tv(std::span<const double> a, std::span<const double> b, double lo, double hi,
                    std::size_t bins = 50);

}  // namespace qsdlab
