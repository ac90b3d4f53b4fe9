#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "coscale/schedule.h"

namespace coscale {

struct SamplerConfig {
  int top_k = 600;
  double top_p = 0.96;
  // Per-scale temperature; scales past the end use 1.0.
  std::vector<double> temp_schedule;
  bool greedy = false;

  double temperature(int k) const {
    return k < static_cast<int>(temp_schedule.size()) ? temp_schedule[k] : 1.0;
  }

  // top_k 600, top_p 0.96, t = 1.1 on the first seven scales and 1.0 after.
  static SamplerConfig recipe(int num_scales);
  static SamplerConfig greedy_config();

  // Throws kContract on top_k < 1, top_p outside (0, 1], or t <= 0.
  void validate() const;
};

inline constexpr int kDrafterId = 0;
inline constexpr int kRefinerId = 1;

struct DecodePlan {
  int partition_n = 0;
  // assignment[k] indexes the model list handed to the decoder.
  std::vector<int> assignment;
  SamplerConfig sampler;
  std::optional<double> cfg_scale;
  std::uint64_t seed = 0;

  // Drafter on scales [0, n), refiner on [n, K).
  static DecodePlan collaborative(const ScaleSchedule& schedule, int n, SamplerConfig sampler,
                                  std::uint64_t seed);
  // A single model (id 0) on every scale.
  static DecodePlan single(const ScaleSchedule& schedule, SamplerConfig sampler,
                           std::uint64_t seed);

  // Throws kRange / kContract when the plan does not fit `schedule`.
  void validate(const ScaleSchedule& schedule) const;

  int cfg_factor() const { return cfg_scale ? 2 : 1; }
};

}  // namespace coscale
