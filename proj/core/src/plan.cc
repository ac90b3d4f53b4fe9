#include "coscale/plan.h"

#include <cmath>
#include <string>

#include "coscale/errors.h"

namespace coscale {

SamplerConfig SamplerConfig::recipe(int num_scales) {
  SamplerConfig cfg;
  cfg.temp_schedule.assign(static_cast<std::size_t>(num_scales), 1.0);
  for (int k = 0; k < num_scales && k < 7; ++k) cfg.temp_schedule[k] = 1.1;
  return cfg;
}

SamplerConfig SamplerConfig::greedy_config() {
  SamplerConfig cfg;
  cfg.greedy = true;
  return cfg;
}

void SamplerConfig::validate() const {
  require(top_k >= 1, ErrorKind::kContract, "top_k must be >= 1");
  require(top_p > 0.0 && top_p <= 1.0, ErrorKind::kContract, "top_p must lie in (0, 1]");
  for (double t : temp_schedule) {
    require(std::isfinite(t) && t > 0.0, ErrorKind::kContract, "temperatures must be > 0");
  }
}

DecodePlan DecodePlan::collaborative(const ScaleSchedule& schedule, int n,
                                     SamplerConfig sampler, std::uint64_t seed) {
  require(n >= 0 && n <= schedule.num_scales(), ErrorKind::kRange,
          "partition " + std::to_string(n) + " outside [0, K]");
  DecodePlan plan;
  plan.partition_n = n;
  plan.assignment.resize(schedule.num_scales());
  for (int k = 0; k < schedule.num_scales(); ++k) {
    plan.assignment[k] = k < n ? kDrafterId : kRefinerId;
  }
  plan.sampler = std::move(sampler);
  plan.seed = seed;
  return plan;
}

DecodePlan DecodePlan::single(const ScaleSchedule& schedule, SamplerConfig sampler,
                              std::uint64_t seed) {
  DecodePlan plan = collaborative(schedule, schedule.num_scales(), std::move(sampler), seed);
  return plan;
}

void DecodePlan::validate(const ScaleSchedule& schedule) const {
  require(partition_n >= 0 && partition_n <= schedule.num_scales(), ErrorKind::kRange,
          "partition_n outside [0, K]");
  require(static_cast<int>(assignment.size()) == schedule.num_scales(), ErrorKind::kContract,
          "assignment must have one entry per scale");
  for (int id : assignment) require(id >= 0, ErrorKind::kContract, "negative model id");
  if (cfg_scale) {
    require(std::isfinite(*cfg_scale), ErrorKind::kContract, "cfg_scale must be finite");
  }
  sampler.validate();
}

}  // namespace coscale
