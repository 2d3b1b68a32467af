#pragma once

#include <stdexcept>
#include <string>

namespace dedpc {

/// Malformed or inconsistent input data (network files, datasets, configs).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Requested power injections are outside what the sine coupling can carry.
class InfeasibleInjection : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The implicit integrator could not converge at a time step.
class StepFailure : public std::runtime_error {
 public:
  StepFailure(std::size_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class InitializationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf met while differentiating or training.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(std::size_t epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Checkpoint or dataset file that cannot be read back.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An upstream pipeline artifact (dataset, checkpoint, policy) is missing.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dedpc
