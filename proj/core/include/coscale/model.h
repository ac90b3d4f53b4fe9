#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "coscale/quantizer.h"
#include "coscale/schedule.h"
#include "coscale/tensor.h"

namespace coscale {

struct ModelConfig {
  int depth = 2;
  int width = 32;
  int heads = 2;
  int vocab = 64;
  int cond_classes = 10;
  int channels = 8;  // codebook width C
  std::vector<int> patch_nums = {1, 2, 3, 4};

  int max_scales() const { return static_cast<int>(patch_nums.size()); }
  ScaleSchedule schedule() const { return ScaleSchedule::build(patch_nums); }
  int head_dim() const { return width / heads; }

  // Throws kContract on non-positive fields or width % heads != 0.
  void validate() const;

  // Exact count of scalar parameters in a ModelBundle with this config.
  std::int64_t param_count() const;

  // VAR-style presets "d16", "d20", "d24", "d30": width = 64 * depth,
  // heads = depth, V = 4096, 1000 classes, C = 32, default schedule.
  static ModelConfig preset(std::string_view name);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s);

  std::size_t numel() const noexcept { return data.size(); }
  float* ptr() noexcept { return data.data(); }
  const float* ptr() const noexcept { return data.data(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct LayerWeights {
  Tensor ln1_weight, ln1_bias;
  Tensor qkv_weight, qkv_bias;    // width x 3*width, 3*width
  Tensor proj_weight, proj_bias;  // width x width, width
  Tensor ln2_weight, ln2_bias;
  Tensor fc1_weight, fc1_bias;  // width x 4*width, 4*width
  Tensor fc2_weight, fc2_bias;  // 4*width x width, width

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct InitOptions {
  double std = 0.02;
  bool zero_head = true;
};

// Weights and architecture of one next-scale transformer. Immutable once
// built; share freely across threads.
struct ModelBundle {
  ModelConfig config;
  Tensor input_proj;  // C x width, no bias
  Tensor class_emb;   // (cond_classes + 1) x width; the last row is the null class
  Tensor start_pos;   // width
  Tensor scale_emb;   // K x width
  Tensor pos_emb;     // total_tokens x width
  std::vector<LayerWeights> layers;
  Tensor final_ln_weight, final_ln_bias;
  Tensor head_weight, head_bias;  // width x V, V

  // All weights zero (layer norm gains included).
  static ModelBundle zeros(const ModelConfig& config);
  // N(0, std) weights, unit layer-norm gains, zero biases; head zeroed when
  // requested. Element e of tensor t draws normal_at(seed, e, t, kInitTag).
  static ModelBundle random(const ModelConfig& config, std::uint64_t seed,
                            const InitOptions& options = {});

  int null_class() const { return config.cond_classes; }

  // Visits tensors in canonical checkpoint order.
  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);

  // Throws kShape when any tensor disagrees with the config.
  void validate() const;

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

// Per-layer key/value buffers for `rows` independent sequences. Keys and values
// are held in float32; byte accounting uses the declared storage width so the
// same engine can report half-precision footprints.
class KVCacheState {
 public:
  KVCacheState() = default;
  KVCacheState(int depth, int width, int rows, int bytes_per_element);

  int depth() const noexcept { return depth_; }
  int width() const noexcept { return width_; }
  int rows() const noexcept { return rows_; }
  int bytes_per_element() const noexcept { return bytes_per_element_; }
  int cached_tokens() const noexcept { return cached_tokens_; }
  bool released() const noexcept { return released_; }

  // Element count actually held in the buffers times bytes_per_element.
  std::size_t measured_bytes() const;
  // 2 * depth * width * cached_tokens * bytes_per_element * rows.
  std::size_t formula_bytes() const;

  std::span<const float> keys(int layer, int row) const;
  std::span<const float> values(int layer, int row) const;

  // Appends `tokens` positions for one layer and row. Positions are committed
  // to cached_tokens() by commit().
  void append(int layer, int row, std::span<const float> k, std::span<const float> v);
  void commit(int tokens);
  void reserve(int tokens);

  // Drops all buffers. Returns freed bytes; 0 on a second call.
  std::size_t release();

 private:
  std::size_t slot(int layer, int row) const {
    return static_cast<std::size_t>(layer) * rows_ + row;
  }

  int depth_ = 0;
  int width_ = 0;
  int rows_ = 0;
  int bytes_per_element_ = 4;
  int cached_tokens_ = 0;
  bool released_ = false;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

inline std::size_t kv_bytes(int depth, int width, std::int64_t tokens, int bytes_per_element,
                            std::int64_t rows) {
  return static_cast<std::size_t>(2) * depth * width * tokens * bytes_per_element * rows;
}

// Input block for scale k (patch_nums[k]^2 x width). Scale 0 is the class
// embedding plus scale/position embeddings; later scales project the running
// reconstruction `prev` (final resolution, C channels) resampled to side k.
Matrix build_scale_input(const ModelBundle& m, const FeatureMap& prev, int k, int cond);

// One incremental step: queries of scale k attend to every cached position plus
// the whole of scale k; scale k's keys/values are appended. `inputs` holds one
// block per cache row. Throws kContract unless the cache holds exactly the
// condition token and scales [0, k).
std::vector<Matrix> forward_scale(const ModelBundle& m, KVCacheState& cache,
                                  std::span<const Matrix> inputs, int k, int jobs = 1);

// Single masked pass over [cond token, scales of prefix] with block-causal
// attention. Populates a fresh cache for `conds.size()` rows; prefixes[i] are
// the tokens of row i (all the same length). Returns the cache.
KVCacheState ingest_prefix(const ModelBundle& m, const Codebook& cb,
                           std::span<const TokenPyramid> prefixes, std::span<const int> conds,
                           int bytes_per_element = 4, int jobs = 1);

KVCacheState ingest_prefix(const ModelBundle& m, const Codebook& cb, const TokenPyramid& prefix,
                           int cond, int bytes_per_element = 4);

// Teacher-forced logits for every scale of `r` from one masked pass.
std::vector<Matrix> teacher_forced_logits(const ModelBundle& m, const Codebook& cb,
                                          const TokenPyramid& r, int cond);

std::size_t release_cache(KVCacheState& cache);

}  // namespace coscale
