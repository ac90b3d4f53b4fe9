#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "coscale/analysis.h"
#include "coscale/finetune.h"
#include "coscale/orchestrator.h"
#include "coscale/schedule.h"

namespace coscale {

// {"vocab": V, "patch_nums": [...], "maps": [[[row], ...], ...]}
nlohmann::json pyramid_to_json(const TokenPyramid& r);
// Throws kConfig on malformed input.
TokenPyramid pyramid_from_json(const nlohmann::json& j);

nlohmann::json stats_to_json(const DecodeStats& stats);
nlohmann::json loss_report_to_json(const finetune::LossReport& report);
nlohmann::json memory_report_to_json(const analysis::MemoryReport& report);
nlohmann::json latency_report_to_json(const analysis::LatencyReport& report);

// Binary PPM (P6), 8 bits per channel.
void write_ppm(const Image& img, const std::filesystem::path& path);
// True when PNG support was compiled in and the file was written.
bool write_png(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

// Square PGM/PPM (P2/P3/P5/P6); any non-zero pixel is inside the mask.
Mask read_mask(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Loss fixture file:
//   {"cases": [{"name", "kind": "drafter" | "refiner", "n", "ep", "total_ep",
//               "logits" | "student" + "teacher": [scale][row][vocab],
//               "targets": [scale][row], "expected_loss", "expected_grad",
//               "loss_rtol", "grad_rtol"}]}
struct FixtureOutcome {
  std::string name;
  bool passed = false;
  double loss_error = 0.0;
  double max_grad_error = 0.0;
};

std::vector<FixtureOutcome> check_loss_fixtures(const nlohmann::json& fixtures);

}  // namespace coscale
