#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace qsdlab {

/// Malformed or out-of-range inputs (parameters, vectors, configs).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A model returned a non-finite value while being evaluated.
class ModelEvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Preset or discretization not supported by the requested operation.
class UnsupportedModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The resampling loop of Q_mu did not find a surviving proposal in time.
class ResurrectionOverflowError : public std::runtime_error {
 public:
  ResurrectionOverflowError(std::size_t iterations, std::size_t particle, std::size_t step);

  std::size_t iterations() const { return iterations_; }
  std::size_t particle() const { return particle_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t iterations_;
  std::size_t particle_;
  std::size_t step_;
};

/// Conditional law undefined: surviving mass is (numerically) zero.
class ExtinctionUnderflowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Perron triplet requested on a non-primitive matrix.
class ReducibleChainError : public std::runtime_error {
 public:
  ReducibleChainError(std::vector<std::vector<std::size_t>> classes, std::size_t period);

  /// Communicating classes in topological order (sources first).
  const std::vector<std::vector<std::size_t>>& classes() const { return classes_; }
  /// Period of the chain when it is irreducible but periodic, else 0.
  std::size_t period() const { return period_; }

 private:
  std::vector<std::vector<std::size_t>> classes_;
  std::size_t period_;
};

/// Filesystem failure while writing outputs.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Harris certificate used where all-pass verdicts are required.
class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace qsdlab
