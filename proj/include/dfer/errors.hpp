#pragma once

#include <stdexcept>
#include <string>

namespace dfer {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform to an operation's signature.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value or inconsistent user input.
struct ConfigError : Error {
  using Error::Error;
};

// Binary container problems. `kind` separates the failure classes so
// callers and tests can tell truncation from corruption from bad headers.
struct FormatError : Error {
  enum class Kind { bad_magic, bad_version, bad_kind, truncated, integrity, bad_record };
  Kind kind;
  FormatError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Text-file parse failure; `line` is 1-based.
struct ParseError : Error {
  int line;
  ParseError(int ln, const std::string& msg)
      : Error("line " + std::to_string(ln) + ": " + msg), line(ln) {}
};

// Operation attempted in the wrong lifecycle state (missing prerequisite
// stage, mutation of a locked parameter group, ...).
struct StateError : Error {
  using Error::Error;
};

// Numerical contract violation (degenerate feature norm, non-finite value).
struct NumericError : Error {
  using Error::Error;
};

// Filesystem-level failure distinct from content-level FormatError.
struct IoError : Error {
  using Error::Error;
};

}  // namespace dfer
