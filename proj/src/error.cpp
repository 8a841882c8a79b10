#include "mbf/error.hpp"

namespace mbf {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid argument";
    case ErrorKind::Config: return "config";
    case ErrorKind::MissingArtifact: return "missing artifact";
    case ErrorKind::BadMagic: return "bad magic";
    case ErrorKind::CountMismatch: return "count mismatch";
    case ErrorKind::NonFinite: return "non-finite value";
    case ErrorKind::UnsupportedVersion: return "unsupported version";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::Diverged: return "diverged";
    case ErrorKind::Runtime: return "runtime";
  }
  return "unknown";
}

}  // namespace mbf
