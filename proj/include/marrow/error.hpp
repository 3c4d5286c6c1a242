#pragma once

#include <stdexcept>
#include <string>

namespace marrow {

enum class ErrorKind {
  contract,    // precondition violated by the caller
  dimension,   // tensor shapes disagree
  numeric,     // NaN / divergence
  length,      // sequence longer than the model accepts
  config,      // bad configuration value
  dependency,  // a pipeline stage ran before its inputs exist
  data,        // malformed or inconsistent input files
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MARROW_DEFINE_ERROR(Name, Kind)                                     \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MARROW_DEFINE_ERROR(ContractError, contract)
MARROW_DEFINE_ERROR(DimensionError, dimension)
MARROW_DEFINE_ERROR(NumericError, numeric)
MARROW_DEFINE_ERROR(LengthError, length)
MARROW_DEFINE_ERROR(ConfigError, config)
MARROW_DEFINE_ERROR(DependencyError, dependency)
MARROW_DEFINE_ERROR(DataError, data)

#undef MARROW_DEFINE_ERROR

/// Process exit code for the CLI: 2 config, 3 dependency, 4 data and
/// everything else raised by the library.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return 2;
    case ErrorKind::dependency:
      return 3;
    default:
      return 4;
  }
}

}  // namespace marrow
