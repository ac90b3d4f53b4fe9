#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coscale/plan.h"
#include "coscale/schedule.h"

namespace coscale {

struct OutputConfig {
  std::filesystem::path dir = ".";
  std::string prefix = "sample";
  bool png = true;
};

// Everything needed for a reproducible generation run. Relative paths in the
// file resolve against the config file's directory.
struct RunConfig {
  ScaleSchedule schedule = ScaleSchedule::default_schedule();
  std::filesystem::path vqvae;
  std::filesystem::path drafter;
  std::optional<std::filesystem::path> refiner;
  DecodePlan plan;
  std::vector<int> classes = {0};  // one per batch element
  int bytes_per_element = 4;
  int jobs = 1;
  OutputConfig output;

  int batch() const { return static_cast<int>(classes.size()); }
};

// YAML parser. Any input either yields a valid RunConfig or throws kConfig with
// a "line L, field F: ..." diagnostic.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);

// Throws kMissingArtifact if a referenced checkpoint does not exist.
void check_artifacts(const RunConfig& cfg);

// Applies a COSCALE_SEED-style override; throws kConfig on a malformed value.
void apply_seed_override(RunConfig& cfg, const char* value);

}  // namespace coscale
