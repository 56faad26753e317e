#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kdaudit {

// invalid-argument contract violations reuse std::invalid_argument directly.

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a loss turns NaN/Inf mid-training; carries the failing step.
struct TrainingDiverged : std::runtime_error {
  int64_t step;
  explicit TrainingDiverged(int64_t step_index)
      : std::runtime_error("training diverged (non-finite loss) at step " +
                           std::to_string(step_index)),
        step(step_index) {}
};

// Mann-Whitney U is undefined when every value in both samples is identical.
struct DegenerateSamples : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A significance table was requested for a condition that has no runs.
struct IncompleteMatrix : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InternalError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace kdaudit
