#pragma once

#include <stdexcept>
#include <string>

namespace kws {

// Every error carries the module that raised it as a message prefix,
// e.g. "numeric-core: affine: ...".
class Error : public std::runtime_error {
 public:
  Error(const std::string& module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(module) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

// Incompatible extents.
class DimensionError : public Error {
  using Error::Error;
};

// A caller violated an operation precondition.
class ContractError : public Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
  using Error::Error;
};

// Malformed input file (WAV, manifest, config).
class ParseError : public Error {
  using Error::Error;
};

// Corrupt or incompatible checkpoint.
class FormatError : public Error {
  using Error::Error;
};

// Numerical failure (NaN loss, solver breakdown).
class NumericError : public Error {
  using Error::Error;
};

class IoError : public Error {
  using Error::Error;
};

}  // namespace kws
