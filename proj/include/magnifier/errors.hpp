#pragma once

#include <stdexcept>
#include <string>

namespace magnifier {

// Shape disagreement between operands. The message names the offending axes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A call that violates an operation's preconditions (wrong mode, wrong order, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a loss component becomes non-finite during training.
class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace magnifier
