#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "qsdlab/models.hpp"

namespace qsdlab {

/// Sub-Markov matrix M = exp(t0 A) of a killed chain at horizon t0.
struct KilledSemigroupMatrix {
  Eigen::MatrixXd m;
  double horizon = 1.0;

  std::size_t size() const { return static_cast<std::size_t>(m.rows()); }
  /// Throws InputError on negative entries or row sums above 1 + 1e-12.
  void validate() const;
};

/// (theta, h, gamma_left) with gamma_left a probability and gamma_left(h) = 1.
/// theta is per unit time: the matrix eigenvalue is exp(-theta * horizon).
struct EigenTriplet {
  double theta = 0.0;
  Eigen::VectorXd h;
  Eigen::VectorXd gamma_left;
  double horizon = 1.0;
  double left_residual = 0.0;   ///< relative residual of the left eigen-equation
  double right_residual = 0.0;  ///< relative residual of the right eigen-equation
  std::size_t iterations = 0;
  bool converged = false;
};

struct PowerIterationOptions {
  double tolerance = 1e-12;  ///< TV between successive normalized iterates
  std::size_t max_iterations = 100000;
};

/// exp(t A) by uniformization; Poisson tails truncated below 1e-12. Large
/// Lambda t is split into 2^s equal pieces whose product is formed by squaring.
KilledSemigroupMatrix killed_semigroup(const FiniteKilledChain& chain, double t);

/// eta exp(t A) for a row vector, by uniformization (no matrix is formed).
Eigen::VectorXd propagate(const FiniteKilledChain& chain, const Eigen::VectorXd& eta, double t);

/// eta M / (eta M 1).
Eigen::VectorXd conditional_law_step(const KilledSemigroupMatrix& m, const Eigen::VectorXd& eta);

/// Communicating classes of the directed graph {i -> j : m(i,j) > 0}, in
/// topological order (a class only reaches classes listed after it).
std::vector<std::vector<std::size_t>> communicating_classes(const Eigen::MatrixXd& m);

/// Period of an irreducible nonnegative matrix (1 = aperiodic).
std::size_t period(const Eigen::MatrixXd& m);

/// Perron triplet by power iteration on M and its transpose. Throws
/// ReducibleChainError unless M is primitive. Near-critical cases that hit
/// the iteration cap are returned with converged = false and the residuals.
EigenTriplet perron_triplet(const KilledSemigroupMatrix& m, const PowerIterationOptions& opts = {});

/// Perron triplet of a generator, by power iteration on the nonnegative
/// resolvent (sigma I - A)^{-1}, which shares eigenvectors with every M_t.
/// Used for stiff grid chains where M_t cannot be formed. The reported
/// horizon is 1 and residuals refer to A h = -theta h.
EigenTriplet perron_triplet_generator(const FiniteKilledChain& chain, const PowerIterationOptions& opts = {});

/// QSD attached to one communicating class of a reducible killed chain.
struct ClassQsd {
  std::vector<std::size_t> states;
  double theta = 0.0;  ///< decay rate of the class block
  std::optional<Eigen::VectorXd> qsd;  ///< absent when a downstream class decays as slowly
  std::string note;
};

/// Runs a Perron computation per communicating class and extends each class
/// eigenvector to the states it feeds. One QSD per class whose block decays
/// strictly slower than every class it reaches.
std::vector<ClassQsd> class_qsds(const KilledSemigroupMatrix& m);

/// Index into class_qsds(m) of the QSD attracting the conditional law from
/// eta0: the slowest-decaying class reachable from supp(eta0). nullopt on ties
/// or when that class carries no QSD.
std::optional<std::size_t> attracting_class(const KilledSemigroupMatrix& m, const std::vector<ClassQsd>& qsds,
                                            const Eigen::VectorXd& eta0);

/// Survival probabilities (eta0 M^k 1) for k = 1..n.
std::vector<double> survival_curve(const KilledSemigroupMatrix& m, const Eigen::VectorXd& eta0, std::size_t n);

/// Two leading decay rates (per unit time) from the eigenvalues of M,
/// ordered by modulus.
struct LeadingRates {
  double theta1 = 0.0;
  double theta2 = 0.0;
  double gap() const { return theta2 - theta1; }
};
LeadingRates leading_rates(const KilledSemigroupMatrix& m);

/// Generator discretization on a uniform grid: central differences for the
/// half-Laplacian, upwind drift, uniform-redraw rows for house_of_card,
/// Dirichlet (kill) rows for the hard-killed interval. Grid coordinates are
/// cell midpoints for torus and house_of_card, i/(n+1) for the interval.
FiniteKilledChain grid_generator(const Preset& preset, std::size_t n_grid);

/// One-step kernel of the discrete-time model (move, then kill at the
/// destination) projected on a uniform midpoint grid. Its Perron vector is
/// the QSD nu_gamma of the time-discretized chain. Rows are filled in
/// parallel.
KilledSemigroupMatrix grid_step_kernel(const Preset& preset, double gamma, std::size_t n_grid);

/// Same kernel built row by row on one thread.
KilledSemigroupMatrix grid_step_kernel_serial(const Preset& preset, double gamma, std::size_t n_grid);

/// Midpoints (i + 0.5) / n used by grid_step_kernel.
std::vector<double> midpoint_grid(std::size_t n_grid);

}  // namespace qsdlab
