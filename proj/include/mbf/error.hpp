#pragma once

#include <stdexcept>
#include <string>

namespace mbf {

enum class ErrorKind {
  InvalidArgument,    // precondition violation on a public operation
  Config,             // bad run configuration (unknown key, bad value)
  MissingArtifact,    // a prerequisite file or directory does not exist
  BadMagic,
  CountMismatch,
  NonFinite,
  UnsupportedVersion,
  Parse,
  Io,
  Diverged,
  Runtime,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Bad arguments, configuration or input files map to CLI exit code 1;
  // failures while running map to 2.
  bool is_validation() const noexcept {
    return kind_ != ErrorKind::Io && kind_ != ErrorKind::Diverged && kind_ != ErrorKind::Runtime;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorKind::InvalidArgument, what);
}

}  // namespace mbf
