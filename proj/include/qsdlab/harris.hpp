#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "qsdlab/models.hpp"
#include "qsdlab/spectral.hpp"

namespace qsdlab {

enum class Verdict { pass, fail, asymptotic_fail };

std::string to_string(Verdict v);

/// Outcome of one assumption. `witness` is the state (or depth, for A4) where
/// the inequality is tightest; re-evaluating there reproduces `value`.
struct AssumptionCheck {
  Verdict verdict = Verdict::fail;
  double value = 0.0;
  std::size_t witness = 0;
  std::optional<std::size_t> witness2;  ///< second index (A3: the atom y)
  std::string detail;
};

struct HarrisCertificate {
  double t0 = 1.0;
  Eigen::VectorXd V;
  Eigen::VectorXd psi;
  std::vector<std::size_t> K;  ///< sorted
  Eigen::VectorXd nu;
  double alpha = 0.0;
  double beta = 0.0;
  double C = 0.0;
  double c = 0.0;
  double d = 0.0;
  double sup_K_V_over_psi = 0.0;
  std::size_t n_max = 50;
  AssumptionCheck a1, a2, a3, a4;
  std::vector<double> a4_ratios;  ///< ratio at depth n = 1..n_max

  bool all_pass() const;
};

/// Thresholds below which c and d count as zero.
inline constexpr double kHarrisZero = 1e-12;

/// Evaluates (A1)-(A4) for M = M_{t0}.
///
/// A1: alpha = max over x outside K of MV/V, C the smallest constant covering
/// K. When K is the whole space alpha can be taken arbitrarily small; beta/2
/// is used. Passes iff 0 < alpha < beta.
/// A2: beta = min Mpsi/psi. Passes iff beta > 0.
/// A3: on a finite space it suffices to test f = 1_y for the atoms of nu.
/// A4: d = min over n <= n_max of nu(M^n psi / psi) / max_K (M^n psi / psi).
/// A ratio sequence that is still decreasing geometrically at n_max is an
/// asymptotic fail.
HarrisCertificate check_assumptions(const KilledSemigroupMatrix& m, const Eigen::VectorXd& V,
                                    const Eigen::VectorXd& psi, std::vector<std::size_t> K,
                                    const Eigen::VectorXd& nu, std::size_t n_max = 50);

struct IrreducibilityResult {
  double epsilon = 0.0;
  bool pass = false;
  std::size_t witness_from = 0;
  std::size_t witness_to = 0;
};

/// inf over x, y in K of P_x(hit y before t0) for the killed chain, from the
/// uniformized chain with y made absorbing.
IrreducibilityResult check_irreducibility(const FiniteKilledChain& chain, const std::vector<std::size_t>& K,
                                          double t0);

struct ConclusionReport {
  EigenTriplet triplet;
  double rho = 0.0;            ///< exp(-theta t0)
  double lower_slack = 0.0;    ///< rho - beta
  double upper_slack = 0.0;    ///< alpha + C - rho
  bool bounds_hold = false;
  double gamma_V = 0.0;
  double c2 = 0.0;             ///< max h / V
  std::vector<std::pair<double, double>> c1_by_q;  ///< (q, min h / ((psi/V)^q psi))
  double omega = 0.0;          ///< fitted decay rate of the weighted error, per unit time
  double omega_r2 = 0.0;
  std::optional<double> spectral_gap;  ///< theta2 - theta1 when the spectrum was computed
};

/// Throws PreconditionError unless every verdict of `cert` passes.
ConclusionReport verify_conclusion(const KilledSemigroupMatrix& m, const HarrisCertificate& cert);

/// Decay rate of sum_y |e^{theta k t0} (mu M^k)(y) - mu(h) gamma(y)| V(y)
/// over k = 1..steps, fitted on the iterates above 1e-11 relative error.
std::pair<double, double> fit_normalized_decay(const KilledSemigroupMatrix& m, const EigenTriplet& triplet,
                                               const Eigen::VectorXd& V, const Eigen::VectorXd& mu,
                                               std::size_t steps = 400);

enum class LyapunovFamily { geometric, exponential };

/// Candidate sets K are sublevel sets of V / psi. `proper` excludes the whole space,
/// where (A1) holds trivially.
enum class KPolicy { proper_sublevel_sets, all_sublevel_sets };

struct SearchOptions {
  LyapunovFamily family = LyapunovFamily::geometric;
  std::vector<double> q1_grid = {0.5, 0.8, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5};
  std::vector<double> q2_grid;  ///< empty: 0.1, 0.15, ..., 2.0
  std::optional<double> t0;     ///< default 10 / Lambda
  KPolicy k_policy = KPolicy::proper_sublevel_sets;
  std::size_t n_max = 50;
};

struct SearchResult {
  bool found = false;
  HarrisCertificate best;  ///< best passing certificate, or the least violated
  double q1 = 0.0;
  double q2 = 0.0;
  double t0 = 0.0;
  std::size_t candidates = 0;
  std::size_t passing = 0;
  /// How many candidates fail each assumption (index 0..3 = A1..A4).
  std::array<std::size_t, 4> failures{};
  std::string diagnostic;
};

/// Grid search over V = q1^x, psi = q2^x (x the state coordinate; for the
/// exponential family V = e^{q1 x}), K over sublevel sets of V / psi, and nu over
/// Diracs on K plus the uniform law on K. Among nu passing (A3) the one with
/// the largest d is kept. Candidates are ranked by all-pass, then beta - alpha,
/// then smaller C.
SearchResult search_lyapunov_pair(const FiniteKilledChain& chain, const SearchOptions& opts = {});

nlohmann::json certificate_to_json(const HarrisCertificate& cert);
nlohmann::json conclusion_to_json(const ConclusionReport& report);
nlohmann::json search_to_json(const SearchResult& result);

}  // namespace qsdlab
