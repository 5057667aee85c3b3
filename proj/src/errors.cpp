#include "qsdlab/errors.hpp"

#include <fmt/format.h>

namespace qsdlab {

ResurrectionOverflowError::ResurrectionOverflowError(std::size_t iterations, std::size_t particle,
                                                     std::size_t step)
    : std::runtime_error(fmt::format("resurrection loop exceeded {} iterations (particle {}, step {})",
                                     iterations, particle, step)),
      iterations_(iterations),
      particle_(particle),
      step_(step) {}

ReducibleChainError::ReducibleChainError(std::vector<std::vector<std::size_t>> classes, std::size_t period)
    : std::runtime_error(period > 1
                             ? fmt::format("matrix is irreducible but periodic (period {})", period)
                             : fmt::format("matrix is reducible: {} communicating classes", classes.size())),
      classes_(std::move(classes)),
      period_(period) {}

}  // namespace qsdlab
