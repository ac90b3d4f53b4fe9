#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coscale/model.h"
#include "coscale/quantizer.h"

namespace coscale {

// Binary checkpoint layout (all integers little-endian):
//
//   offset 0   4 bytes   magic "CSCK"
//   offset 4   u32       format version (1)
//   offset 8   u64       header length H in bytes
//   offset 16  H bytes   UTF-8 JSON header
//   16 + H     payload   raw little-endian tensors
//
// The header holds {"format_version", "kind" ("model" | "vqvae"), "config",
// "param_count", "payload_bytes", "tensors": [{name, dtype ("f32" | "f64"),
// shape, offset, nbytes}]}. Tensor offsets are relative to the payload start,
// must not overlap and must tile the payload exactly.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

struct CheckpointHeader {
  std::string kind;
  nlohmann::json config;
  std::int64_t param_count = 0;
  std::uint64_t payload_bytes = 0;
  std::vector<TensorEntry> tensors;
};

// Reads and validates the header and tensor directory without touching the
// payload. Throws kMissingArtifact, kCorruptCheckpoint or kIo.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_model(const ModelBundle& m, const std::filesystem::path& path);
ModelBundle load_model(const std::filesystem::path& path);

void save_vq(const VqModel& vq, const std::filesystem::path& path);
VqModel load_vq(const std::filesystem::path& path);

// Writes ModelBundle::random(config, seed) with std 0.02 and a zero head.
ModelBundle init_random_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& path);

}  // namespace coscale
