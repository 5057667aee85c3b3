#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qsdlab/fv_engine.hpp"
#include "qsdlab/harris.hpp"
#include "qsdlab/metrics.hpp"
#include "qsdlab/models.hpp"

namespace qsdlab {

enum class Mode { simulate, oracle, harris, sweep };

std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

/// Initial law of the particles.
struct InitSpec {
  enum class Kind { uniform, dirac, state, weights } kind = Kind::uniform;
  std::vector<double> point;    ///< dirac
  std::size_t index = 0;        ///< state
  std::vector<double> weights;  ///< weights (finite chains)
};

struct SweepSpec {
  std::vector<double> gammas;
  std::vector<std::size_t> Ns;
  std::vector<double> horizons;
  std::vector<std::uint64_t> seeds;  ///< replica indices
  double burn_in_fraction = 0.5;
  double snapshot_interval = 0.1;  ///< time between snapshots
  std::string experiment;          ///< "" or "noncommutation"
};

struct OracleSpec {
  std::size_t n_grid = 1000;
  double horizon = 1.0;
  std::size_t survival_steps = 50;
};

struct ExperimentConfig {
  std::optional<Mode> mode;
  Preset preset;
  nlohmann::json model_json;  ///< canonical {name, params} with defaults filled
  std::string model_hash;
  FVConfig fv;
  InitSpec init;
  SweepSpec sweep;
  std::vector<std::string> metrics;
  OracleSpec oracle;
  SearchOptions harris;
  std::optional<std::string> output_dir;
  std::uint64_t seed = 0;
};

/// Strict parse: unknown keys, wrong types and out-of-range values throw
/// InputError. `mode` (from the command line) must agree with the file.
ExperimentConfig parse_config(const nlohmann::json& j, std::optional<Mode> mode = std::nullopt);

/// Resolved config with all defaults, suitable for re-running.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

Preset parse_preset(const nlohmann::json& model);
nlohmann::json preset_to_json(const Preset& p);

/// FNV-1a of the canonical model JSON, as 16 hex digits.
std::string model_hash(const Preset& p);

std::unique_ptr<SampleableMeasure> make_init(const InitSpec& init, const Preset& p);

/// Reference measure used by the W1 metrics.
struct MeasureOracle {
  EmpiricalMeasure measure;
  double theta = 0.0;
  std::string source;
};

/// QSD of the continuous-time model: closed form when known, otherwise the
/// Perron vector of the grid generator.
MeasureOracle continuous_qsd_oracle(const Preset& p, std::size_t n_grid);

/// QSD nu_gamma of the time-discretized chain from the projected step kernel.
MeasureOracle discrete_qsd_oracle(const Preset& p, double gamma, std::size_t n_grid);

/// QSD of a finite chain attracting `eta0` (per state index).
Eigen::VectorXd finite_qsd_oracle(const Preset& p, double horizon, const Eigen::VectorXd& eta0);

struct SweepRow {
  std::string metric;
  double value = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double gamma = 0.0;
  std::size_t N = 0;
  double t = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  nlohmann::json summary;
};

/// Runs every (gamma, N, seed) point, up to `jobs` at a time. Rows come out in
/// (gamma, N, t, seed, metric) order whatever the job count.
SweepResult run_sweep(const ExperimentConfig& cfg, int jobs);

std::string sweep_csv(const SweepResult& r, const std::string& model_hash);

/// Mass of the FV empirical measure on the transient state of two_point (b > a)
/// for every (N, t), averaged over seeds, next to the exact conditional law.
struct NoncommutationTable {
  std::vector<std::size_t> Ns;
  std::vector<double> ts;
  std::vector<std::vector<double>> mass;       ///< [N][t]
  std::vector<std::vector<double>> std_error;  ///< [N][t]
  std::vector<double> conditional_law;         ///< [t], the N = infinity column
  double qsd_mass = 0.0;                       ///< (b - a) / b
};

NoncommutationTable run_noncommutation(const ExperimentConfig& cfg, int jobs);
std::string format_noncommutation(const NoncommutationTable& t);

struct RunOptions {
  int jobs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;  ///< overrides config and environment
};

/// Output directory: RunOptions, then the config, then $QSDLAB_OUTPUT_DIR,
/// then ./qsdlab_out.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& opts);

/// Runs the configured mode and writes its files. Progress goes to `log`.
void run_experiment(ExperimentConfig cfg, Mode mode, const RunOptions& opts, std::ostream& log);

/// Exit status documented by the CLI: 2 bad config, 3 runtime, 4 io.
int exit_code_for(const std::exception& e);

}  // namespace qsdlab
