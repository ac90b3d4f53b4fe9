#include "coscale/analysis.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "coscale/errors.h"

namespace coscale::analysis {
namespace {

std::size_t activation_bytes(const ModelConfig& cfg, const ScaleSchedule& schedule, int k,
                             std::size_t rows, int bpe) {
  const std::size_t t = static_cast<std::size_t>(schedule.tokens_at(k));
  const std::size_t keys = 1 + static_cast<std::size_t>(schedule.offset(k + 1));
  const std::size_t w = static_cast<std::size_t>(cfg.width);
  const std::size_t per_row = static_cast<std::size_t>(cfg.heads) * t * keys  // scores
                              + t * 3 * w                                     // qkv
                              + t * 4 * w                                     // MLP hidden
                              + t * static_cast<std::size_t>(cfg.vocab);      // logits
  return per_row * rows * static_cast<std::size_t>(bpe);
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string mib(std::size_t bytes) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.0fMB", static_cast<double>(bytes) / (1024.0 * 1024.0));
  return buf;
}

}  // namespace

MemoryReport kv_memory_model(const ModelConfig& drafter, const ScaleSchedule& schedule,
                             const MemoryOptions& options, int partition_n,
                             const std::optional<ModelConfig>& refiner) {
  const int K = schedule.num_scales();
  const std::int64_t rows = static_cast<std::int64_t>(options.batch) * options.cfg_factor;
  const int bpe = options.bytes_per_element;
  const int total_positions = schedule.total_tokens() + 1;
  MemoryReport r;

  if (!refiner) {
    r.phases.draft_peak = kv_bytes(drafter.depth, drafter.width, total_positions, bpe, rows);
    r.kv_cache = r.phases.draft_peak;
    r.running = activation_bytes(drafter, schedule, K - 1, rows, bpe);
    r.params = static_cast<std::size_t>(drafter.param_count()) * options.param_bytes_per_element;
  } else {
    const int n = partition_n;
    require(n >= 0 && n <= K, ErrorKind::kRange, "partition outside [0, K]");
    const int draft_positions = 1 + prefix_tokens(schedule, n);
    if (n > 0) {
      r.phases.draft_peak = kv_bytes(drafter.depth, drafter.width, draft_positions, bpe, rows);
      r.running = activation_bytes(drafter, schedule, n - 1, rows, bpe);
    }
    if (n < K) {
      r.phases.post_release = kv_bytes(refiner->depth, refiner->width, draft_positions, bpe, rows);
      r.phases.refine_peak = kv_bytes(refiner->depth, refiner->width, total_positions, bpe, rows);
      r.running = std::max(r.running, activation_bytes(*refiner, schedule, K - 1, rows, bpe));
    }
    r.kv_cache = std::max(r.phases.draft_peak, r.phases.refine_peak);
    r.params = static_cast<std::size_t>(drafter.param_count() + refiner->param_count()) *
               options.param_bytes_per_element;
  }
  r.total = r.running + r.kv_cache + r.params;
  return r;
}

std::vector<MemoryRow> memory_table(const ModelConfig& drafter, const ModelConfig& refiner,
                                    const ScaleSchedule& schedule, std::span<const int> batches,
                                    int partition_n, MemoryOptions options) {
  std::vector<MemoryRow> rows;
  for (int bs : batches) {
    require(bs >= 1, ErrorKind::kRange, "batch size must be positive");
    options.batch = bs;
    rows.push_back({bs, kv_memory_model(drafter, schedule, options, partition_n, std::nullopt),
                    kv_memory_model(drafter, schedule, options, partition_n, refiner)});
  }
  return rows;
}

std::string format_memory_table(std::span<const MemoryRow> rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %10s %10s %10s %10s %9s\n", "Method", "Running",
                "KV Cache", "Params", "Total", "KV ratio");
  os << line;
  for (const auto& row : rows) {
    const std::string name = "VAR (bs=" + std::to_string(row.batch) + ")";
    std::snprintf(line, sizeof(line), "%-14s %10s %10s %10s %10s %9s\n", name.c_str(),
                  mib(row.vanilla.running).c_str(), mib(row.vanilla.kv_cache).c_str(),
                  mib(row.vanilla.params).c_str(), mib(row.vanilla.total).c_str(), "1.000");
    os << line;
    char ratio[16];
    std::snprintf(ratio, sizeof(ratio), "%.3f", row.kv_ratio());
    std::snprintf(line, sizeof(line), "%-14s %10s %10s %10s %10s %9s\n", "+Collab",
                  mib(row.collaborative.running).c_str(), mib(row.collaborative.kv_cache).c_str(),
                  mib(row.collaborative.params).c_str(), mib(row.collaborative.total).c_str(),
                  ratio);
    os << line;
  }
  return os.str();
}

LatencyReport summarize_latency(std::span<const DecodeStats> runs) {
  require(static_cast<int>(runs.size()) >= kMinRepetitions, ErrorKind::kInsufficientSamples,
          "need at least " + std::to_string(kMinRepetitions) + " measured runs, got " +
              std::to_string(runs.size()));
  const std::size_t K = runs.front().scale_seconds.size();
  LatencyReport rep;
  rep.repetitions = static_cast<int>(runs.size());
  std::vector<double> column(runs.size());
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      require(runs[i].scale_seconds.size() == K, ErrorKind::kContract,
              "runs disagree on scale count");
      column[i] = runs[i].scale_seconds[k];
    }
    const double m = mean_of(column);
    rep.scale_mean.push_back(m);
    rep.scale_stddev.push_back(stddev_of(column, m));
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    double ingest = 0.0;
    for (const auto& h : runs[i].handoffs) ingest += h.ingest_seconds;
    column[i] = ingest;
  }
  rep.ingest_mean = mean_of(column);
  rep.ingest_stddev = stddev_of(column, rep.ingest_mean);

  double total = 0.0, tail = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    total += rep.scale_mean[k];
    if (k + 3 >= K) tail += rep.scale_mean[k];
  }
  rep.decode_mean = total;
  rep.last_three_fraction = total > 0.0 ? tail / total : 1.0;
  return rep;
}

LatencyReport profile_latency(const std::function<DecodeStats()>& run, int warmup,
                              int repetitions) {
  require(warmup >= kMinWarmup, ErrorKind::kInsufficientSamples,
          "need at least " + std::to_string(kMinWarmup) + " warmup runs");
  require(repetitions >= kMinRepetitions, ErrorKind::kInsufficientSamples,
          "need at least " + std::to_string(kMinRepetitions) + " measured runs");
  for (int i = 0; i < warmup; ++i) (void)run();
  std::vector<DecodeStats> runs;
  runs.reserve(repetitions);
  for (int i = 0; i < repetitions; ++i) runs.push_back(run());
  return summarize_latency(runs);
}

SpectrumReport radial_spectrum(const FeatureMap& f) {
  const int n = f.side();
  require(n >= 1 && f.channels() >= 1, ErrorKind::kShape, "spectrum needs a non-empty square map");

  std::vector<double> signal(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double s = 0.0;
      for (double v : f.cell(y, x)) s += v;
      signal[static_cast<std::size_t>(y) * n + x] = s / f.channels();
    }
  }

  std::vector<double> cos_t(n), sin_t(n);
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * i / n;
    cos_t[i] = std::cos(a);
    sin_t[i] = std::sin(a);
  }
  // Row transform then column transform.
  std::vector<double> re(signal.size()), im(signal.size());
  for (int y = 0; y < n; ++y) {
    for (int u = 0; u < n; ++u) {
      double sr = 0.0, si = 0.0;
      for (int x = 0; x < n; ++x) {
        const int idx = (u * x) % n;
        const double v = signal[static_cast<std::size_t>(y) * n + x];
        sr += v * cos_t[idx];
        si -= v * sin_t[idx];
      }
      re[static_cast<std::size_t>(y) * n + u] = sr;
      im[static_cast<std::size_t>(y) * n + u] = si;
    }
  }

  SpectrumReport rep;
  rep.side = n;
  const int max_bin = static_cast<int>(std::lround(std::sqrt(2.0) * (n / 2)));
  std::vector<double> power(max_bin + 1, 0.0);
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      double sr = 0.0, si = 0.0;
      for (int y = 0; y < n; ++y) {
        const int idx = (v * y) % n;
        const double ar = re[static_cast<std::size_t>(y) * n + u];
        const double ai = im[static_cast<std::size_t>(y) * n + u];
        sr += ar * cos_t[idx] + ai * sin_t[idx];
        si += ai * cos_t[idx] - ar * sin_t[idx];
      }
      const int fu = u <= n / 2 ? u : u - n;
      const int fv = v <= n / 2 ? v : v - n;
      const int bin = static_cast<int>(std::lround(std::sqrt(static_cast<double>(fu * fu + fv * fv))));
      power[bin] += sr * sr + si * si;
    }
  }

  for (double s : signal) rep.spatial_energy += s * s;
  double total = 0.0;
  for (double p : power) total += p;
  rep.spectral_energy = total / (static_cast<double>(n) * n);

  rep.energy.assign(power.size(), 0.0);
  if (total > 0.0) {
    for (std::size_t b = 0; b < power.size(); ++b) rep.energy[b] = power[b] / total;
  } else {
    rep.energy[0] = 1.0;  // a zero map is constant
  }
  for (std::size_t b = 0; b < power.size(); ++b) {
    rep.bin_centers.push_back(static_cast<double>(b) / n);
    rep.bin_edges.push_back(std::max(0.0, (static_cast<double>(b) - 0.5) / n));
  }
  rep.bin_edges.push_back((static_cast<double>(power.size()) - 0.5) / n);
  return rep;
}

double energy_above(const SpectrumReport& report, double cycles_per_pixel) {
  double s = 0.0;
  for (std::size_t b = 0; b < report.energy.size(); ++b) {
    if (report.bin_centers[b] > cycles_per_pixel) s += report.energy[b];
  }
  return s;
}

std::string spectrum_csv(const SpectrumReport& report) {
  std::ostringstream os;
  os << "bin_center,fraction\n";
  char line[64];
  for (std::size_t b = 0; b < report.energy.size(); ++b) {
    std::snprintf(line, sizeof(line), "%.6f,%.12f\n", report.bin_centers[b], report.energy[b]);
    os << line;
  }
  return os.str();
}

FeatureMap scale_contribution(const TokenPyramid& r, int k, const Codebook& cb,
                              const ScaleSchedule& schedule) {
  require(k >= 0 && k < r.num_scales() && k < schedule.num_scales(), ErrorKind::kRange,
          "scale index out of range");
  require(r.maps[k].side == schedule.side(k), ErrorKind::kShape, "token map side mismatch");
  return upsample(embed(r.maps[k], cb), schedule.final_side());
}

}  // namespace coscale::analysis
