#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coscale/model.h"
#include "coscale/orchestrator.h"
#include "coscale/plan.h"
#include "coscale/quantizer.h"
#include "coscale/schedule.h"

namespace coscale::analysis {

struct MemoryPhases {
  std::size_t draft_peak = 0;    // drafter cache after its last scale
  std::size_t post_release = 0;  // refiner cache right after ingesting the prefix
  std::size_t refine_peak = 0;   // refiner cache after the final scale
};

// Byte estimates for one decoding configuration. kv_cache is the peak live KV
// footprint; running is the activation footprint of the widest forward pass
// (attention scores, qkv, MLP hidden, logits); params uses
// param_bytes_per_element.
struct MemoryReport {
  std::size_t running = 0;
  std::size_t kv_cache = 0;
  std::size_t params = 0;
  std::size_t total = 0;
  MemoryPhases phases;
};

struct MemoryOptions {
  int batch = 1;
  int bytes_per_element = 2;
  int cfg_factor = 1;
  int param_bytes_per_element = 4;
};

// Without `refiner`: vanilla decoding with `drafter` on every scale.
// With `refiner`: drafter on [0, N), refiner on [N, K), peak KV = max over phases
// since the drafter cache is released before the refiner's grows.
MemoryReport kv_memory_model(const ModelConfig& drafter, const ScaleSchedule& schedule,
                             const MemoryOptions& options, int partition_n,
                             const std::optional<ModelConfig>& refiner);

struct MemoryRow {
  int batch = 0;
  MemoryReport vanilla;
  MemoryReport collaborative;
  double kv_ratio() const {
    return static_cast<double>(collaborative.kv_cache) / static_cast<double>(vanilla.kv_cache);
  }
};

std::vector<MemoryRow> memory_table(const ModelConfig& drafter, const ModelConfig& refiner,
                                    const ScaleSchedule& schedule, std::span<const int> batches,
                                    int partition_n, MemoryOptions options);

// Aligned text table: Method | Running | KV Cache | Params | Total | KV ratio (MiB).
std::string format_memory_table(std::span<const MemoryRow> rows);

inline constexpr int kMinWarmup = 3;
inline constexpr int kMinRepetitions = 10;

struct LatencyReport {
  int repetitions = 0;
  std::vector<double> scale_mean;
  std::vector<double> scale_stddev;
  double ingest_mean = 0.0;  // summed handoff ingest time per run
  double ingest_stddev = 0.0;
  double decode_mean = 0.0;  // sum of per-scale means
  double last_three_fraction = 0.0;
};

// Aggregates measured runs. Throws kInsufficientSamples below kMinRepetitions.
LatencyReport summarize_latency(std::span<const DecodeStats> runs);

// Runs `warmup` unmeasured then `repetitions` measured generations on the
// calling thread. Throws kInsufficientSamples below the minimums.
LatencyReport profile_latency(const std::function<DecodeStats()>& run, int warmup,
                              int repetitions);

struct SpectrumReport {
  int side = 0;
  std::vector<double> bin_centers;  // cycles / pixel
  std::vector<double> bin_edges;    // bin_centers.size() + 1 entries
  std::vector<double> energy;       // fractions, sum to 1
  double spatial_energy = 0.0;      // sum of squares of the channel mean
  double spectral_energy = 0.0;     // sum |F|^2 / side^2
};

// Power of the 2-D DFT of the channel mean, binned by integer-rounded radial
// frequency index. Throws kShape on an empty map.
SpectrumReport radial_spectrum(const FeatureMap& f);

// Fraction of energy in bins whose center lies strictly above `cycles_per_pixel`.
double energy_above(const SpectrumReport& report, double cycles_per_pixel);

// "bin_center,fraction" lines with a header.
std::string spectrum_csv(const SpectrumReport& report);

// upsample(embed(r_k), final side): scale k's additive share of the reconstruction.
FeatureMap scale_contribution(const TokenPyramid& r, int k, const Codebook& cb,
                              const ScaleSchedule& schedule);

}  // namespace coscale::analysis
