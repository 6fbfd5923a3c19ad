#pragma once

#include <stdexcept>
#include <string>

namespace surgeon {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int { ok = 0, config = 2, infeasible = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::numeric; }
};

/// Invalid knob values, shape mismatches between config and data.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

/// Model/batch incompatibilities inside the forward/backward harness.
class HarnessError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Unreadable or empty corpus, malformed checkpoint files.
class IngestionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// A sparsity target that cannot be reached without emptying a layer.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& layer, const std::string& what)
      : Error(what), layer_(layer) {}
  ExitCode exit_code() const noexcept override { return ExitCode::infeasible; }
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

/// Non-finite values, failed factorizations, degenerate curvature.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense-oracle computations refused because the instance is too large.
class OracleScaleError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace surgeon
