#pragma once

#include <stdexcept>
#include <string>

namespace pengi {

/// Process exit codes used by the command line front end.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

/// Root of the library's exception hierarchy. Every error knows the exit
/// code the CLI should report for it.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::kConfig) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, ExitCode::kNumeric) {}
};

// Contract violations that stem from malformed inputs map to the data exit code.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class TokenizerError : public Error {
 public:
  explicit TokenizerError(const std::string& what) : Error(what, ExitCode::kData) {}
};

class TemplateError : public Error {
 public:
  explicit TemplateError(const std::string& what) : Error(what, ExitCode::kData) {}
};

}  // namespace pengi
