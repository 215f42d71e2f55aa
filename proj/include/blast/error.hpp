#pragma once

#include <stdexcept>
#include <string>

namespace blast {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input data problems: non-finite entries, malformed files, shape mismatches
// between studies.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& file, std::size_t row, std::size_t col,
             const std::string& what)
      : DataError(file + ":" + std::to_string(row) + ":" +
                  std::to_string(col) + ": " + what),
        row_(row),
        col_(col) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Numerical failures of the estimation pipeline.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateSignalError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DegenerateVarianceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InfeasibleHyperparameterError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InvalidCovarianceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class GenerationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// Caller supplied an out-of-range parameter (level, strategy value, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kConfig = 2,
  kData = 3,
  kNumerical = 4,
};

}  // namespace blast
