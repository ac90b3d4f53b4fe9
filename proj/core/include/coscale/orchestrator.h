#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "coscale/model.h"
#include "coscale/plan.h"
#include "coscale/quantizer.h"
#include "coscale/schedule.h"

namespace coscale {

// A model switch between consecutive scales: the outgoing cache is released
// and the incoming model rebuilds its own cache from the token prefix.
struct HandoffEvent {
  int scale = 0;  // first scale produced by the incoming model
  int from_model = 0;
  int to_model = 0;
  std::size_t freed_bytes = 0;
  int ingested_positions = 0;  // condition token + prefix tokens
  double ingest_seconds = 0.0;
};

struct DecodeStats {
  int rows = 0;  // batch * guidance factor
  int bytes_per_element = 4;
  std::vector<double> scale_seconds;
  std::vector<int> scale_model;
  std::vector<std::size_t> cache_bytes;          // measured, after scale k's append
  std::vector<std::size_t> cache_formula_bytes;  // closed form at the same point
  std::size_t peak_cache_bytes = 0;
  double start_seconds = 0.0;  // condition-token cache of the first model
  std::vector<HandoffEvent> handoffs;
  std::size_t handoff_freed_bytes = 0;
  double image_seconds = 0.0;
};

struct GenerationResult {
  std::vector<TokenPyramid> pyramids;  // one per batch element
  std::vector<Image> images;
  DecodeStats stats;
};

struct DecodeOptions {
  int bytes_per_element = 4;
  int jobs = 1;
  // Batch element b samples on RNG stream first_stream + b.
  std::uint32_t first_stream = 0;
};

// Boolean grid at final token resolution; true marks cells to regenerate.
struct Mask {
  int side = 0;
  std::vector<std::uint8_t> inside;

  Mask() = default;
  Mask(int s, bool value) : side(s), inside(static_cast<std::size_t>(s) * s, value ? 1 : 0) {}
  bool at(int y, int x) const { return inside[static_cast<std::size_t>(y) * side + x] != 0; }
  void set(int y, int x, bool v) { inside[static_cast<std::size_t>(y) * side + x] = v ? 1 : 0; }
};

// Pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// A scale-k cell is inside when any final-resolution cell it covers is inside.
std::vector<Mask> downsample_mask(const Mask& mask, const ScaleSchedule& schedule);

Mask box_mask(const BoundingBox& box, int side);

GenerationResult decode_vanilla(const ModelBundle& m, const VqModel& vq,
                                std::span<const int> conds, const DecodePlan& plan,
                                const DecodeOptions& options = {});

// Drafter on scales [0, N), refiner on [N, K). The drafter cache is released at
// the handoff and the refiner ingests the drafted maps in one masked pass.
GenerationResult decode_collaborative(const ModelBundle& drafter, const ModelBundle& refiner,
                                      const VqModel& vq, std::span<const int> conds,
                                      const DecodePlan& plan, const DecodeOptions& options = {});

// General form: plan.assignment[k] indexes `models`. Each change of model id
// between consecutive scales is a handoff.
GenerationResult decode_assigned(std::span<const ModelBundle* const> models, const VqModel& vq,
                                 std::span<const int> conds, const DecodePlan& plan,
                                 const DecodeOptions& options = {});

// One bundle pointer per scale; consecutive equal pointers share a cache.
// plan.assignment is ignored and rebuilt from pointer identity.
GenerationResult decode_per_scale(std::span<const ModelBundle* const> per_scale,
                                  const VqModel& vq, std::span<const int> conds,
                                  const DecodePlan& plan, const DecodeOptions& options = {});

// Teacher-forced generation: cells outside `mask` (after per-scale
// downsampling) take the ground-truth token before they are accumulated.
GenerationResult inpaint(std::span<const ModelBundle* const> models, const VqModel& vq,
                         std::span<const int> conds, const TokenPyramid& ground_truth,
                         const Mask& mask, const DecodePlan& plan,
                         const DecodeOptions& options = {});

// inpaint with mask = box interior under the editing class.
GenerationResult edit_box(std::span<const ModelBundle* const> models, const VqModel& vq,
                          std::span<const int> conds, const TokenPyramid& ground_truth,
                          const BoundingBox& box, const DecodePlan& plan,
                          const DecodeOptions& options = {});

}  // namespace coscale
