#include "coscale/orchestrator.h"

#include <algorithm>
#include <chrono>
#include <optional>
#include <string>

#include "coscale/errors.h"
#include "coscale/parallel.h"
#include "coscale/sampler.h"

namespace coscale {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_compatible(const ModelBundle& m, const VqModel& vq, const ScaleSchedule& schedule) {
  require(m.config.schedule() == schedule, ErrorKind::kContract,
          "models disagree on the scale schedule");
  require(m.config.vocab == vq.codebook.vocab(), ErrorKind::kContract,
          "model vocab does not match the codebook");
  require(m.config.channels == vq.codebook.channels(), ErrorKind::kContract,
          "model channels do not match the codebook");
}

// Cache rows: batch elements first, then their null-class twins under guidance.
struct RowLayout {
  int batch = 0;
  int factor = 1;
  std::vector<int> conds;

  RowLayout(std::span<const int> batch_conds, const DecodePlan& plan, const ModelBundle& m)
      : batch(static_cast<int>(batch_conds.size())), factor(plan.cfg_factor()) {
    require(batch > 0, ErrorKind::kContract, "at least one condition required");
    conds.assign(batch_conds.begin(), batch_conds.end());
    if (factor == 2) conds.insert(conds.end(), batch, m.null_class());
  }

  int rows() const { return batch * factor; }
  void set_null_class(int null_class) {
    for (int r = batch; r < rows(); ++r) conds[r] = null_class;
  }
};

// Picks the sampling logits of batch element b (guided when enabled).
Matrix element_logits(const std::vector<Matrix>& logits, const RowLayout& rows,
                      const DecodePlan& plan, int b) {
  if (rows.factor == 1) return logits[b];
  return guided_logits(logits[b], logits[b + rows.batch], *plan.cfg_scale);
}

void apply_teacher_forcing(std::vector<std::int32_t>& tokens, const TokenMap& truth,
                           const Mask& free_cells) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (free_cells.inside[i] == 0) tokens[i] = truth.tokens[i];
  }
}

GenerationResult finish(std::vector<TokenPyramid> pyramids, std::vector<FeatureMap> acc,
                        const VqModel& vq, DecodeStats stats) {
  GenerationResult result;
  const auto t0 = Clock::now();
  for (const auto& f : acc) result.images.push_back(decode_image(f, vq.decoder));
  stats.image_seconds = seconds_since(t0);
  result.pyramids = std::move(pyramids);
  result.stats = std::move(stats);
  return result;
}

struct TeacherForcing {
  const TokenPyramid* truth = nullptr;
  std::vector<Mask> free_cells;  // per scale
};

GenerationResult run_assigned(std::span<const ModelBundle* const> models, const VqModel& vq,
                              std::span<const int> conds, const DecodePlan& plan,
                              const DecodeOptions& options, const TeacherForcing* forcing) {
  require(!models.empty() && models[0] != nullptr, ErrorKind::kContract, "no models given");
  const ScaleSchedule schedule = models[0]->config.schedule();
  plan.validate(schedule);
  for (int id : plan.assignment) {
    require(id < static_cast<int>(models.size()) && models[id] != nullptr, ErrorKind::kContract,
            "assignment references model " + std::to_string(id) + " which was not supplied");
    check_compatible(*models[id], vq, schedule);
  }

  const int K = schedule.num_scales();
  RowLayout rows(conds, plan, *models[plan.assignment.empty() ? 0 : plan.assignment[0]]);
  const int B = rows.batch;

  std::vector<TokenPyramid> pyramids(B, TokenPyramid{vq.codebook.vocab(), {}});
  std::vector<FeatureMap> acc(B, FeatureMap(schedule.final_side(), vq.codebook.channels()));
  DecodeStats stats;
  stats.rows = rows.rows();
  stats.bytes_per_element = options.bytes_per_element;

  std::optional<KVCacheState> cache;
  int current = -1;
  for (int k = 0; k < K; ++k) {
    const int id = plan.assignment[k];
    const ModelBundle& m = *models[id];
    if (id != current) {
      rows.set_null_class(m.null_class());
      std::vector<TokenPyramid> prefixes;
      prefixes.reserve(rows.rows());
      for (int r = 0; r < rows.rows(); ++r) prefixes.push_back(pyramids[r % B]);
      HandoffEvent event;
      if (cache) {
        event.freed_bytes = release_cache(*cache);
        event.from_model = current;
      }
      const auto t0 = Clock::now();
      cache = ingest_prefix(m, vq.codebook, prefixes, rows.conds, options.bytes_per_element,
                            options.jobs);
      const double elapsed = seconds_since(t0);
      stats.peak_cache_bytes = std::max(stats.peak_cache_bytes, cache->measured_bytes());
      if (current < 0) {
        stats.start_seconds = elapsed;
      } else {
        event.scale = k;
        event.to_model = id;
        event.ingested_positions = cache->cached_tokens();
        event.ingest_seconds = elapsed;
        stats.handoff_freed_bytes += event.freed_bytes;
        stats.handoffs.push_back(event);
      }
      current = id;
    }

    const auto t0 = Clock::now();
    std::vector<Matrix> inputs(rows.rows());
    for (int r = 0; r < rows.rows(); ++r) {
      inputs[r] = build_scale_input(m, acc[r % B], k, rows.conds[r]);
    }
    const std::vector<Matrix> logits = forward_scale(m, *cache, inputs, k, options.jobs);
    parallel_for(static_cast<std::size_t>(B), options.jobs, [&](std::size_t bi) {
      const int b = static_cast<int>(bi);
      auto tokens = sample_tokens(element_logits(logits, rows, plan, b), plan.sampler, k,
                                  plan.seed, options.first_stream + b);
      if (forcing != nullptr) {
        apply_teacher_forcing(tokens, forcing->truth->maps[k], forcing->free_cells[k]);
      }
      TokenMap map(schedule.side(k));
      map.tokens = std::move(tokens);
      accumulate_scale(acc[b], map, vq.codebook);
      pyramids[b].maps.push_back(std::move(map));
    });
    stats.scale_seconds.push_back(seconds_since(t0));
    stats.scale_model.push_back(id);
    stats.cache_bytes.push_back(cache->measured_bytes());
    stats.cache_formula_bytes.push_back(cache->formula_bytes());
    stats.peak_cache_bytes = std::max(stats.peak_cache_bytes, cache->measured_bytes());
  }
  if (cache) release_cache(*cache);
  return finish(std::move(pyramids), std::move(acc), vq, std::move(stats));
}

}  // namespace

std::vector<Mask> downsample_mask(const Mask& mask, const ScaleSchedule& schedule) {
  const int n = schedule.final_side();
  require(mask.side == n && mask.inside.size() == static_cast<std::size_t>(n) * n,
          ErrorKind::kShape, "mask must be at final resolution");
  std::vector<Mask> out;
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int s = schedule.side(k);
    Mask m(s, false);
    for (int cy = 0; cy < s; ++cy) {
      const int y0 = cy * n / s;
      const int y1 = ((cy + 1) * n + s - 1) / s;
      for (int cx = 0; cx < s; ++cx) {
        const int x0 = cx * n / s;
        const int x1 = ((cx + 1) * n + s - 1) / s;
        bool any = false;
        for (int y = y0; y < y1 && !any; ++y) {
          for (int x = x0; x < x1 && !any; ++x) any = mask.at(y, x);
        }
        m.set(cy, cx, any);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

Mask box_mask(const BoundingBox& box, int side) {
  require(box.x0 >= 0 && box.y0 >= 0 && box.x1 <= side && box.y1 <= side, ErrorKind::kRange,
          "bounding box outside the image");
  Mask m(side, false);
  for (int y = box.y0; y < box.y1; ++y) {
    for (int x = box.x0; x < box.x1; ++x) m.set(y, x, true);
  }
  return m;
}

GenerationResult decode_vanilla(const ModelBundle& m, const VqModel& vq,
                                std::span<const int> conds, const DecodePlan& plan,
                                const DecodeOptions& options) {
  const ScaleSchedule schedule = m.config.schedule();
  check_compatible(m, vq, schedule);
  plan.validate(schedule);
  const int first = plan.assignment.front();
  require(std::all_of(plan.assignment.begin(), plan.assignment.end(),
                      [&](int id) { return id == first; }),
          ErrorKind::kContract, "vanilla decoding needs a single-model assignment");

  RowLayout rows(conds, plan, m);
  const int B = rows.batch;
  std::vector<TokenPyramid> pyramids(B, TokenPyramid{vq.codebook.vocab(), {}});
  std::vector<FeatureMap> acc(B, FeatureMap(schedule.final_side(), vq.codebook.channels()));
  DecodeStats stats;
  stats.rows = rows.rows();
  stats.bytes_per_element = options.bytes_per_element;

  const std::vector<TokenPyramid> empty(rows.rows(), TokenPyramid{vq.codebook.vocab(), {}});
  auto t_start = Clock::now();
  KVCacheState cache =
      ingest_prefix(m, vq.codebook, empty, rows.conds, options.bytes_per_element, options.jobs);
  stats.start_seconds = seconds_since(t_start);

  for (int k = 0; k < schedule.num_scales(); ++k) {
    const auto t0 = Clock::now();
    std::vector<Matrix> inputs;
    for (int r = 0; r < rows.rows(); ++r) {
      inputs.push_back(build_scale_input(m, acc[r % B], k, rows.conds[r]));
    }
    const auto logits = forward_scale(m, cache, inputs, k, options.jobs);
    for (int b = 0; b < B; ++b) {
      TokenMap map(schedule.side(k));
      map.tokens = sample_tokens(element_logits(logits, rows, plan, b), plan.sampler, k,
                                 plan.seed, options.first_stream + b);
      accumulate_scale(acc[b], map, vq.codebook);
      pyramids[b].maps.push_back(std::move(map));
    }
    stats.scale_seconds.push_back(seconds_since(t0));
    stats.scale_model.push_back(first);
    stats.cache_bytes.push_back(cache.measured_bytes());
    stats.cache_formula_bytes.push_back(cache.formula_bytes());
    stats.peak_cache_bytes = std::max(stats.peak_cache_bytes, cache.measured_bytes());
  }
  release_cache(cache);
  return finish(std::move(pyramids), std::move(acc), vq, std::move(stats));
}

GenerationResult decode_collaborative(const ModelBundle& drafter, const ModelBundle& refiner,
                                      const VqModel& vq, std::span<const int> conds,
                                      const DecodePlan& plan, const DecodeOptions& options) {
  const ScaleSchedule schedule = drafter.config.schedule();
  DecodePlan p = DecodePlan::collaborative(schedule, plan.partition_n, plan.sampler, plan.seed);
  p.cfg_scale = plan.cfg_scale;
  const ModelBundle* models[2] = {&drafter, &refiner};
  return run_assigned(models, vq, conds, p, options, nullptr);
}

GenerationResult decode_assigned(std::span<const ModelBundle* const> models, const VqModel& vq,
                                 std::span<const int> conds, const DecodePlan& plan,
                                 const DecodeOptions& options) {
  return run_assigned(models, vq, conds, plan, options, nullptr);
}

namespace {

// Distinct bundles in first-use order plus the per-scale id assignment.
std::pair<std::vector<const ModelBundle*>, std::vector<int>> identify(
    std::span<const ModelBundle* const> per_scale) {
  std::vector<const ModelBundle*> distinct;
  std::vector<int> ids;
  for (const ModelBundle* m : per_scale) {
    require(m != nullptr, ErrorKind::kContract, "null model in per-scale list");
    auto it = std::find(distinct.begin(), distinct.end(), m);
    if (it == distinct.end()) {
      distinct.push_back(m);
      it = distinct.end() - 1;
    }
    ids.push_back(static_cast<int>(it - distinct.begin()));
  }
  return {distinct, ids};
}

}  // namespace

GenerationResult decode_per_scale(std::span<const ModelBundle* const> per_scale,
                                  const VqModel& vq, std::span<const int> conds,
                                  const DecodePlan& plan, const DecodeOptions& options) {
  auto [distinct, ids] = identify(per_scale);
  DecodePlan p = plan;
  p.assignment = ids;
  return run_assigned(distinct, vq, conds, p, options, nullptr);
}

GenerationResult inpaint(std::span<const ModelBundle* const> models, const VqModel& vq,
                         std::span<const int> conds, const TokenPyramid& ground_truth,
                         const Mask& mask, const DecodePlan& plan, const DecodeOptions& options) {
  require(!models.empty() && models[0] != nullptr, ErrorKind::kContract, "no models given");
  const ScaleSchedule schedule = models[0]->config.schedule();
  require(ground_truth.num_scales() == schedule.num_scales(), ErrorKind::kShape,
          "ground truth must cover every scale");
  validate_pyramid(ground_truth, schedule, 0);
  TeacherForcing forcing{&ground_truth, downsample_mask(mask, schedule)};
  return run_assigned(models, vq, conds, plan, options, &forcing);
}

GenerationResult edit_box(std::span<const ModelBundle* const> models, const VqModel& vq,
                          std::span<const int> conds, const TokenPyramid& ground_truth,
                          const BoundingBox& box, const DecodePlan& plan,
                          const DecodeOptions& options) {
  require(!models.empty() && models[0] != nullptr, ErrorKind::kContract, "no models given");
  const int side = models[0]->config.schedule().final_side();
  return inpaint(models, vq, conds, ground_truth, box_mask(box, side), plan, options);
}

}  // namespace coscale
