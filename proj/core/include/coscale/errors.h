#pragma once

#include <stdexcept>
#include <string>

namespace coscale {

enum class ErrorKind {
  kInvalidSchedule,
  kRange,
  kShape,
  kContract,
  kInsufficientSamples,
  kConfig,
  kMissingArtifact,
  kIo,
  kCorruptCheckpoint,
};

const char* to_string(ErrorKind kind);

// Base exception for every failure raised by the library. The kind drives
// CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace coscale
