#pragma once

#include <stdexcept>
#include <string>

namespace otfuse {

enum class ErrorKind {
  Shape,        // dimension or shape mismatch
  InvalidArg,   // argument outside its contract
  Numeric,      // NaN/Inf or divergence
  Solver,       // OT solver could not satisfy its contract
  Heterogeneous,// operation needs identical architectures
  Io,           // file could not be opened/written
  BadMagic,
  UnknownVersion,
  Truncated,
  Inconsistent, // checkpoint directory disagrees with its header
  Config,
};

const char *error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string &what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

} // namespace otfuse
