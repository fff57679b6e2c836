#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace snls {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Sizes or mode counts that do not fit together (grid smaller than the
/// truncation, projector index past the last mode, ...).
class DimensionError : public Error {
public:
  using Error::Error;
};

/// A scalar argument outside its admissible range.
class ParameterError : public Error {
public:
  using Error::Error;
};

/// An operation was invoked on an object that is not ready for it, e.g. the
/// focusing energy before G has been calibrated.
class StateError : public Error {
public:
  using Error::Error;
};

/// A calibrated constant failed its defining inequality on the given input.
class CalibrationError : public Error {
public:
  using Error::Error;
};

/// A caller broke an operation's contract (support, grid alignment, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// A trajectory produced a non-finite coefficient.
class BlowUpError : public Error {
public:
  BlowUpError(std::size_t step, const std::string &what)
      : Error("blow-up at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

private:
  std::size_t step_;
};

/// The residual-law rejection sampler of the maximal coupling hit its cap.
class ResidualSamplingError : public Error {
public:
  using Error::Error;
};

/// Invalid experiment configuration; names the offending key.
class ConfigError : public Error {
public:
  ConfigError(std::string key, const std::string &what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}

  const std::string &key() const noexcept { return key_; }

private:
  std::string key_;
};

} // namespace snls
