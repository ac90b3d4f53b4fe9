#include "coscale/errors.h"

namespace coscale {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidSchedule: return "invalid schedule";
    case ErrorKind::kRange: return "range error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kInsufficientSamples: return "insufficient samples";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kMissingArtifact: return "missing artifact";
    case ErrorKind::kIo: return "i/o error";
    case ErrorKind::kCorruptCheckpoint: return "corrupt checkpoint";
  }
  return "error";
}

void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, std::string(to_string(kind)) + ": " + what);
}

}  // namespace coscale
