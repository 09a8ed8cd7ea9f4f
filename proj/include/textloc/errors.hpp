#pragma once

#include <stdexcept>
#include <string>

namespace textloc {

// Bad value passed to an operation (shape mismatch, index out of range, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent model / layer / run configuration.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input data failed validation. Carries every violation found, one per line.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unsupported file content (e.g. a colour image where a mask is expected).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A backbone lacks a capability required by the requested operation.
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A training step produced a non-finite loss component.
class TrainingStepError : public std::runtime_error {
 public:
  TrainingStepError(std::string component, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace textloc
