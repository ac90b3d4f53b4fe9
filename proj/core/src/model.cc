#include "coscale/model.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "coscale/errors.h"
#include "coscale/parallel.h"
#include "coscale/rng.h"

namespace coscale {
namespace {

constexpr float kLayerNormEps = 1e-6f;

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// out = x W + b, W row-major (in x out). Accumulation order is fixed per row so
// the result never depends on how many rows are processed together.
void linear(std::span<const float> x, const Tensor& w, const Tensor* b, std::span<float> out) {
  const std::size_t in = x.size();
  const std::size_t n = out.size();
  if (b != nullptr) {
    std::copy(b->data.begin(), b->data.end(), out.begin());
  } else {
    std::fill(out.begin(), out.end(), 0.f);
  }
  const float* wp = w.ptr();
  for (std::size_t i = 0; i < in; ++i) {
    const float xi = x[i];
    const float* wr = wp + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xi * wr[j];
  }
}

void layer_norm(std::span<const float> x, const Tensor& gain, const Tensor& bias,
                std::span<float> out) {
  const std::size_t n = x.size();
  float mean = 0.f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float inv = 1.f / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gain.data[i] + bias.data[i];
}

float gelu(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2 / pi)
  return 0.5f * x * (1.f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

// Multi-head attention of one query over the first n_keys cached positions.
void attend(std::span<const float> q, std::span<const float> keys, std::span<const float> values,
            int n_keys, int width, int heads, std::vector<float>& scores, std::span<float> out) {
  const int hd = width / heads;
  const float scale = 1.f / std::sqrt(static_cast<float>(hd));
  scores.resize(n_keys);
  std::fill(out.begin(), out.end(), 0.f);
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    float max_score = -INFINITY;
    for (int t = 0; t < n_keys; ++t) {
      const float* kt = keys.data() + static_cast<std::size_t>(t) * width + off;
      float s = 0.f;
      for (int d = 0; d < hd; ++d) s += q[off + d] * kt[d];
      s *= scale;
      scores[t] = s;
      max_score = std::max(max_score, s);
    }
    float denom = 0.f;
    for (int t = 0; t < n_keys; ++t) {
      scores[t] = std::exp(scores[t] - max_score);
      denom += scores[t];
    }
    float* o = out.data() + off;
    for (int t = 0; t < n_keys; ++t) {
      const float* vt = values.data() + static_cast<std::size_t>(t) * width + off;
      const float p = scores[t];
      for (int d = 0; d < hd; ++d) o[d] += p * vt[d];
    }
    for (int d = 0; d < hd; ++d) o[d] /= denom;
  }
}

// Runs every layer over positions x (n x width) of one cache row. key_end[p]
// is the exclusive end of the keys visible to position p. Keys/values of all
// n positions are appended to the row before attention in each layer.
// Returns logits for positions [logits_from, n) or an empty matrix.
Matrix run_positions(const ModelBundle& m, KVCacheState& cache, int row, Matrix x,
                     std::span<const int> key_end, int logits_from) {
  const auto& cfg = m.config;
  const int w = cfg.width;
  const std::size_t n = x.rows();
  std::vector<float> h(w), qkv(3 * w), attn(w), proj(w), hidden(4 * w), scores;
  Matrix q(n, w), k(n, w), v(n, w);

  for (int l = 0; l < cfg.depth; ++l) {
    const LayerWeights& lw = m.layers[l];
    for (std::size_t p = 0; p < n; ++p) {
      layer_norm(x.row(p), lw.ln1_weight, lw.ln1_bias, h);
      linear(h, lw.qkv_weight, &lw.qkv_bias, qkv);
      std::copy_n(qkv.begin(), w, q.row(p).begin());
      std::copy_n(qkv.begin() + w, w, k.row(p).begin());
      std::copy_n(qkv.begin() + 2 * w, w, v.row(p).begin());
    }
    cache.append(l, row, k.data(), v.data());
    const auto keys = cache.keys(l, row);
    const auto values = cache.values(l, row);
    for (std::size_t p = 0; p < n; ++p) {
      attend(q.row(p), keys, values, key_end[p], w, cfg.heads, scores, attn);
      linear(attn, lw.proj_weight, &lw.proj_bias, proj);
      auto xp = x.row(p);
      for (int i = 0; i < w; ++i) xp[i] += proj[i];
    }
    for (std::size_t p = 0; p < n; ++p) {
      auto xp = x.row(p);
      layer_norm(xp, lw.ln2_weight, lw.ln2_bias, h);
      linear(h, lw.fc1_weight, &lw.fc1_bias, hidden);
      for (float& a : hidden) a = gelu(a);
      linear(hidden, lw.fc2_weight, &lw.fc2_bias, proj);
      for (int i = 0; i < w; ++i) xp[i] += proj[i];
    }
  }

  if (logits_from < 0 || static_cast<std::size_t>(logits_from) >= n) return {};
  Matrix logits(n - logits_from, cfg.vocab);
  for (std::size_t p = logits_from; p < n; ++p) {
    layer_norm(x.row(p), m.final_ln_weight, m.final_ln_bias, h);
    linear(h, m.head_weight, &m.head_bias, logits.row(p - logits_from));
  }
  return logits;
}

void add_row(std::span<float> dst, const Tensor& t, std::size_t row, int width) {
  const float* src = t.ptr() + row * width;
  for (int i = 0; i < width; ++i) dst[i] += src[i];
}

void check_cond(const ModelBundle& m, int cond) {
  require(cond >= 0 && cond <= m.config.cond_classes, ErrorKind::kRange,
          "class id " + std::to_string(cond) + " outside [0, " +
              std::to_string(m.config.cond_classes) + "]");
}

// [cond token, scale 0 block, ..., scale n-1 block] inputs and visibility ends.
struct PrefixLayout {
  Matrix inputs;
  std::vector<int> key_end;
};

PrefixLayout layout_prefix(const ModelBundle& m, const Codebook& cb, const TokenPyramid& prefix,
                           int cond) {
  const auto& cfg = m.config;
  const ScaleSchedule schedule = cfg.schedule();
  const int n = prefix.num_scales();
  const int positions = 1 + schedule.offset(n);
  PrefixLayout out{Matrix(positions, cfg.width), std::vector<int>(positions)};

  auto cond_row = out.inputs.row(0);
  add_row(cond_row, m.class_emb, cond, cfg.width);
  add_row(cond_row, m.start_pos, 0, cfg.width);
  out.key_end[0] = 1;

  FeatureMap acc(schedule.final_side(), cb.channels());
  for (int k = 0; k < n; ++k) {
    const Matrix block = build_scale_input(m, acc, k, cond);
    const int start = 1 + schedule.offset(k);
    const int end = 1 + schedule.offset(k + 1);
    for (int p = start; p < end; ++p) {
      const auto src = block.row(p - start);
      std::copy(src.begin(), src.end(), out.inputs.row(p).begin());
      out.key_end[p] = end;
    }
    accumulate_scale(acc, prefix.maps[k], cb);
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  require(depth > 0 && width > 0 && heads > 0 && vocab > 0 && cond_classes > 0 && channels > 0,
          ErrorKind::kContract, "model config fields must be positive");
  require(width % heads == 0, ErrorKind::kContract, "width must be divisible by heads");
  (void)schedule();
}

std::int64_t ModelConfig::param_count() const {
  const std::int64_t w = width;
  const std::int64_t total_tokens = schedule().total_tokens();
  std::int64_t n = 0;
  n += static_cast<std::int64_t>(channels) * w;      // input_proj
  n += (cond_classes + 1) * w;                       // class_emb
  n += w;                                            // start_pos
  n += max_scales() * w;                             // scale_emb
  n += total_tokens * w;                             // pos_emb
  n += depth * (12 * w * w + 13 * w);                // blocks
  n += 2 * w;                                        // final norm
  n += w * vocab + vocab;                            // head
  return n;
}

ModelConfig ModelConfig::preset(std::string_view name) {
  int depth = 0;
  if (name == "d16") depth = 16;
  else if (name == "d20") depth = 20;
  else if (name == "d24") depth = 24;
  else if (name == "d30") depth = 30;
  else fail(ErrorKind::kConfig, "unknown model preset '" + std::string(name) + "'");
  ModelConfig cfg;
  cfg.depth = depth;
  cfg.width = 64 * depth;
  cfg.heads = depth;
  cfg.vocab = 4096;
  cfg.cond_classes = 1000;
  cfg.channels = 32;
  cfg.patch_nums = ScaleSchedule::default_schedule().patch_nums();
  return cfg;
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  data.assign(static_cast<std::size_t>(n), 0.f);
}

ModelBundle ModelBundle::zeros(const ModelConfig& config) {
  config.validate();
  const std::int64_t w = config.width;
  ModelBundle m;
  m.config = config;
  m.input_proj = Tensor({config.channels, w});
  m.class_emb = Tensor({config.cond_classes + 1, w});
  m.start_pos = Tensor({w});
  m.scale_emb = Tensor({config.max_scales(), w});
  m.pos_emb = Tensor({config.schedule().total_tokens(), w});
  m.layers.resize(config.depth);
  for (auto& l : m.layers) {
    l.ln1_weight = Tensor({w});
    l.ln1_bias = Tensor({w});
    l.qkv_weight = Tensor({w, 3 * w});
    l.qkv_bias = Tensor({3 * w});
    l.proj_weight = Tensor({w, w});
    l.proj_bias = Tensor({w});
    l.ln2_weight = Tensor({w});
    l.ln2_bias = Tensor({w});
    l.fc1_weight = Tensor({w, 4 * w});
    l.fc1_bias = Tensor({4 * w});
    l.fc2_weight = Tensor({4 * w, w});
    l.fc2_bias = Tensor({w});
  }
  m.final_ln_weight = Tensor({w});
  m.final_ln_bias = Tensor({w});
  m.head_weight = Tensor({w, config.vocab});
  m.head_bias = Tensor({config.vocab});
  return m;
}

ModelBundle ModelBundle::random(const ModelConfig& config, std::uint64_t seed,
                                const InitOptions& options) {
  ModelBundle m = zeros(config);
  std::uint32_t tensor_index = 0;
  m.for_each_tensor([&](const std::string& name, Tensor& t) {
    const std::uint32_t idx = tensor_index++;
    if (ends_with(name, ".bias")) return;
    if (ends_with(name, "ln1.weight") || ends_with(name, "ln2.weight") ||
        name == "final_ln.weight") {
      std::fill(t.data.begin(), t.data.end(), 1.f);
      return;
    }
    if (name == "head.weight" && options.zero_head) return;
    for (std::size_t e = 0; e < t.data.size(); ++e) {
      t.data[e] = static_cast<float>(options.std * normal_at(seed, e, idx, kInitTag));
    }
  });
  return m;
}

namespace {

template <typename Bundle, typename Fn>
void visit_tensors(Bundle& m, Fn&& fn) {
  fn(std::string("input_proj"), m.input_proj);
  fn(std::string("class_emb"), m.class_emb);
  fn(std::string("start_pos"), m.start_pos);
  fn(std::string("scale_emb"), m.scale_emb);
  fn(std::string("pos_emb"), m.pos_emb);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "ln1.weight", l.ln1_weight);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.qkv.weight", l.qkv_weight);
    fn(p + "attn.qkv.bias", l.qkv_bias);
    fn(p + "attn.proj.weight", l.proj_weight);
    fn(p + "attn.proj.bias", l.proj_bias);
    fn(p + "ln2.weight", l.ln2_weight);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "mlp.fc1.weight", l.fc1_weight);
    fn(p + "mlp.fc1.bias", l.fc1_bias);
    fn(p + "mlp.fc2.weight", l.fc2_weight);
    fn(p + "mlp.fc2.bias", l.fc2_bias);
  }
  fn(std::string("final_ln.weight"), m.final_ln_weight);
  fn(std::string("final_ln.bias"), m.final_ln_bias);
  fn(std::string("head.weight"), m.head_weight);
  fn(std::string("head.bias"), m.head_bias);
}

}  // namespace

void ModelBundle::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_tensors(*this, fn);
}

void ModelBundle::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_tensors(*this, fn);
}

void ModelBundle::validate() const {
  config.validate();
  const ModelBundle reference = zeros(config);
  std::vector<std::vector<std::int64_t>> shapes;
  std::vector<std::size_t> reference_numel;
  reference.for_each_tensor([&](const std::string&, const Tensor& t) {
    shapes.push_back(t.shape);
    reference_numel.push_back(t.numel());
  });
  std::size_t i = 0;
  for_each_tensor([&](const std::string& name, const Tensor& t) {
    require(i < shapes.size() && t.shape == shapes[i], ErrorKind::kShape,
            "tensor '" + name + "' has a shape inconsistent with the config");
    require(t.numel() == reference_numel[i], ErrorKind::kShape,
            "tensor '" + name + "' has wrong element count");
    for (float v : t.data) {
      require(std::isfinite(v), ErrorKind::kContract, "tensor '" + name + "' is not finite");
    }
    ++i;
  });
  require(i == shapes.size(), ErrorKind::kShape, "layer count inconsistent with config");
}

KVCacheState::KVCacheState(int depth, int width, int rows, int bytes_per_element)
    : depth_(depth),
      width_(width),
      rows_(rows),
      bytes_per_element_(bytes_per_element),
      keys_(static_cast<std::size_t>(depth) * rows),
      values_(static_cast<std::size_t>(depth) * rows) {
  require(depth > 0 && width > 0 && rows > 0, ErrorKind::kContract, "empty cache geometry");
  require(bytes_per_element == 2 || bytes_per_element == 4, ErrorKind::kContract,
          "bytes_per_element must be 2 or 4");
}

std::size_t KVCacheState::measured_bytes() const {
  std::size_t elements = 0;
  for (const auto& k : keys_) elements += k.size();
  for (const auto& v : values_) elements += v.size();
  return elements * static_cast<std::size_t>(bytes_per_element_);
}

std::size_t KVCacheState::formula_bytes() const {
  return kv_bytes(depth_, width_, cached_tokens_, bytes_per_element_, rows_);
}

std::span<const float> KVCacheState::keys(int layer, int row) const { return keys_[slot(layer, row)]; }

std::span<const float> KVCacheState::values(int layer, int row) const {
  return values_[slot(layer, row)];
}

void KVCacheState::append(int layer, int row, std::span<const float> k, std::span<const float> v) {
  require(!released_, ErrorKind::kContract, "append to a released cache");
  auto& kb = keys_[slot(layer, row)];
  auto& vb = values_[slot(layer, row)];
  kb.insert(kb.end(), k.begin(), k.end());
  vb.insert(vb.end(), v.begin(), v.end());
}

void KVCacheState::commit(int tokens) { cached_tokens_ += tokens; }

void KVCacheState::reserve(int tokens) {
  for (auto& k : keys_) k.reserve(static_cast<std::size_t>(tokens) * width_);
  for (auto& v : values_) v.reserve(static_cast<std::size_t>(tokens) * width_);
}

std::size_t KVCacheState::release() {
  if (released_) return 0;
  const std::size_t freed = measured_bytes();
  keys_.clear();
  keys_.shrink_to_fit();
  values_.clear();
  values_.shrink_to_fit();
  cached_tokens_ = 0;
  released_ = true;
  return freed;
}

std::size_t release_cache(KVCacheState& cache) { return cache.release(); }

Matrix build_scale_input(const ModelBundle& m, const FeatureMap& prev, int k, int cond) {
  const auto& cfg = m.config;
  const ScaleSchedule schedule = cfg.schedule();
  require(k >= 0 && k < schedule.num_scales(), ErrorKind::kRange, "scale index out of range");
  check_cond(m, cond);
  const int w = cfg.width;
  const int side = schedule.side(k);
  Matrix out(static_cast<std::size_t>(side) * side, w);

  if (k == 0) {
    auto r = out.row(0);
    add_row(r, m.class_emb, cond, w);
    add_row(r, m.scale_emb, 0, w);
    add_row(r, m.pos_emb, 0, w);
    return out;
  }

  require(prev.side() == schedule.final_side() && prev.channels() == cfg.channels,
          ErrorKind::kShape, "previous reconstruction must be final-resolution with C channels");
  const FeatureMap coarse = downsample(prev, side);
  const float* proj = m.input_proj.ptr();
  std::vector<double> acc(w);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * side + x;
      std::fill(acc.begin(), acc.end(), 0.0);
      const auto f = coarse.cell(y, x);
      for (int c = 0; c < cfg.channels; ++c) {
        const double fc = f[c];
        const float* wr = proj + static_cast<std::size_t>(c) * w;
        for (int j = 0; j < w; ++j) acc[j] += fc * wr[j];
      }
      auto r = out.row(p);
      for (int j = 0; j < w; ++j) r[j] = static_cast<float>(acc[j]);
      add_row(r, m.scale_emb, k, w);
      add_row(r, m.pos_emb, schedule.offset(k) + p, w);
    }
  }
  return out;
}

std::vector<Matrix> forward_scale(const ModelBundle& m, KVCacheState& cache,
                                  std::span<const Matrix> inputs, int k, int jobs) {
  const auto& cfg = m.config;
  const ScaleSchedule schedule = cfg.schedule();
  require(k >= 0 && k < schedule.num_scales(), ErrorKind::kRange, "scale index out of range");
  require(!cache.released(), ErrorKind::kContract, "forward on a released cache");
  require(cache.depth() == cfg.depth && cache.width() == cfg.width, ErrorKind::kContract,
          "cache geometry does not match the model");
  require(cache.cached_tokens() == 1 + schedule.offset(k), ErrorKind::kContract,
          "cache holds " + std::to_string(cache.cached_tokens()) +
              " positions but scale " + std::to_string(k) + " needs " +
              std::to_string(1 + schedule.offset(k)));
  require(static_cast<int>(inputs.size()) == cache.rows(), ErrorKind::kContract,
          "one input block per cache row required");
  const std::size_t tokens = static_cast<std::size_t>(schedule.tokens_at(k));
  for (const auto& in : inputs) {
    require(in.rows() == tokens && in.cols() == static_cast<std::size_t>(cfg.width),
            ErrorKind::kShape, "scale input has wrong shape");
  }

  const int key_end_value = cache.cached_tokens() + static_cast<int>(tokens);
  const std::vector<int> key_end(tokens, key_end_value);
  std::vector<Matrix> logits(inputs.size());
  parallel_for(inputs.size(), jobs, [&](std::size_t r) {
    logits[r] = run_positions(m, cache, static_cast<int>(r), inputs[r], key_end, 0);
  });
  cache.commit(static_cast<int>(tokens));
  return logits;
}

KVCacheState ingest_prefix(const ModelBundle& m, const Codebook& cb,
                           std::span<const TokenPyramid> prefixes, std::span<const int> conds,
                           int bytes_per_element, int jobs) {
  const auto& cfg = m.config;
  const ScaleSchedule schedule = cfg.schedule();
  require(!conds.empty() && prefixes.size() == conds.size(), ErrorKind::kContract,
          "one prefix per condition row required");
  require(cb.channels() == cfg.channels, ErrorKind::kShape, "codebook width != model channels");
  const int n = prefixes[0].num_scales();
  for (const auto& p : prefixes) {
    require(p.num_scales() == n, ErrorKind::kContract, "prefixes differ in length");
    try {
      validate_pyramid(p, schedule, 0);
    } catch (const Error& e) {
      fail(ErrorKind::kContract, std::string("prefix is not a contiguous run from scale 0: ") + e.what());
    }
  }
  for (int c : conds) check_cond(m, c);

  KVCacheState cache(cfg.depth, cfg.width, static_cast<int>(conds.size()), bytes_per_element);
  cache.reserve(1 + schedule.total_tokens());
  const int positions = 1 + schedule.offset(n);
  parallel_for(conds.size(), jobs, [&](std::size_t r) {
    PrefixLayout layout = layout_prefix(m, cb, prefixes[r], conds[r]);
    run_positions(m, cache, static_cast<int>(r), std::move(layout.inputs), layout.key_end, -1);
  });
  cache.commit(positions);
  return cache;
}

KVCacheState ingest_prefix(const ModelBundle& m, const Codebook& cb, const TokenPyramid& prefix,
                           int cond, int bytes_per_element) {
  const int conds[1] = {cond};
  return ingest_prefix(m, cb, std::span<const TokenPyramid>(&prefix, 1), conds, bytes_per_element);
}

std::vector<Matrix> teacher_forced_logits(const ModelBundle& m, const Codebook& cb,
                                          const TokenPyramid& r, int cond) {
  const auto& cfg = m.config;
  const ScaleSchedule schedule = cfg.schedule();
  validate_pyramid(r, schedule, 0);
  check_cond(m, cond);
  KVCacheState cache(cfg.depth, cfg.width, 1, 4);
  PrefixLayout layout = layout_prefix(m, cb, r, cond);
  const Matrix all = run_positions(m, cache, 0, std::move(layout.inputs), layout.key_end, 1);
  std::vector<Matrix> per_scale;
  for (int k = 0; k < r.num_scales(); ++k) {
    Matrix block(schedule.tokens_at(k), cfg.vocab);
    for (int p = 0; p < schedule.tokens_at(k); ++p) {
      const auto src = all.row(schedule.offset(k) + p);
      std::copy(src.begin(), src.end(), block.row(p).begin());
    }
    per_scale.push_back(std::move(block));
  }
  return per_scale;
}

}  // namespace coscale
