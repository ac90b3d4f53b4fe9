#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coscale/errors.h"
#include "coscale/model.h"
#include "coscale/quantizer.h"
#include "test_util.h"

namespace coscale {
namespace {

using testing::random_map;
using testing::random_pyramid;
using testing::toy_config;
using testing::toy_model;

float max_rel_diff(std::span<const float> a, std::span<const float> b) {
  float scale = 0.f, diff = 0.f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / std::max(scale, 1e-30f);
}

// Cache built one scale at a time with teacher-forced inputs.
struct Sequential {
  KVCacheState cache;
  std::vector<Matrix> logits;
};

Sequential sequential_cache(const ModelBundle& m, const Codebook& cb, const TokenPyramid& r,
                            int n, int cond) {
  const auto s = m.config.schedule();
  Sequential out{ingest_prefix(m, cb, TokenPyramid{cb.vocab(), {}}, cond), {}};
  FeatureMap acc(s.final_side(), cb.channels());
  for (int k = 0; k < n; ++k) {
    const Matrix in = build_scale_input(m, acc, k, cond);
    out.logits.push_back(forward_scale(m, out.cache, std::span<const Matrix>(&in, 1), k)[0]);
    accumulate_scale(acc, r.maps[k], cb);
  }
  return out;
}

TEST(ModelConfigTest, Validation) {
  auto c = toy_config();
  c.validate();
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = toy_config();
  c.depth = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(ModelConfigTest, ParamCountMatchesTensors) {
  for (const auto& c : {toy_config(), toy_config({1, 2, 4}, 3, 24, 4, 20, 5)}) {
    const auto m = ModelBundle::zeros(c);
    std::int64_t n = 0;
    m.for_each_tensor([&](const std::string&, const Tensor& t) { n += t.numel(); });
    EXPECT_EQ(n, c.param_count());
  }
}

TEST(ModelConfigTest, PresetParamCountNearTwelveDepthWidthSquared) {
  const auto c = ModelConfig::preset("d16");
  EXPECT_EQ(c.width, 1024);
  EXPECT_EQ(c.heads, 16);
  const double blocks = 12.0 * c.depth * c.width * c.width;
  const double embeddings = static_cast<double>(c.param_count()) - blocks;
  // Blocks dominate; the remainder is embeddings, head and biases.
  EXPECT_GT(blocks / c.param_count(), 0.95);
  EXPECT_LT(embeddings, 0.05 * c.param_count());
  EXPECT_THROW(ModelConfig::preset("d17"), Error);
}

TEST(ModelTest, ZeroWeightsGiveZeroLogits) {
  ModelConfig c = toy_config({1, 2}, 1, 1, 1, 7, 2);
  const auto m = ModelBundle::zeros(c);
  auto cache = ingest_prefix(m, Codebook::random(7, 2, 0), TokenPyramid{7, {}}, 0);
  FeatureMap acc(2, 2);
  for (int k = 0; k < 2; ++k) {
    const Matrix in = build_scale_input(m, acc, k, 0);
    const auto logits = forward_scale(m, cache, std::span<const Matrix>(&in, 1), k)[0];
    EXPECT_EQ(logits.rows(), static_cast<std::size_t>(c.schedule().tokens_at(k)));
    EXPECT_EQ(logits.cols(), 7u);
    for (float v : logits.data()) EXPECT_EQ(v, 0.f);
  }
}

TEST(ModelTest, LogitShapeAndFiniteness) {
  const auto c = toy_config({1, 2, 3, 5});
  const auto m = toy_model(c, 3);
  const auto cb = Codebook::random(c.vocab, c.channels, 3);
  PhiloxStream rng(3, 0);
  const auto r = random_pyramid(c.schedule(), c.vocab, rng);
  const auto seq = sequential_cache(m, cb, r, 4, 1);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(seq.logits[k].rows(), static_cast<std::size_t>(c.patch_nums[k] * c.patch_nums[k]));
    for (float v : seq.logits[k].data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(ModelTest, ForwardRejectsMisalignedCache) {
  const auto c = toy_config();
  const auto m = toy_model(c, 1);
  auto cache = ingest_prefix(m, Codebook::random(c.vocab, c.channels, 0), TokenPyramid{c.vocab, {}}, 0);
  const Matrix in(4, c.width);
  try {
    forward_scale(m, cache, std::span<const Matrix>(&in, 1), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kContract);
  }
}

TEST(ModelTest, PermutingBlockPermutesLogits) {
  const auto c = toy_config({1, 2, 3});
  PhiloxStream rng(12, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = toy_model(c, 50 + trial);
    const auto cb = Codebook::random(c.vocab, c.channels, trial);
    const auto r = random_pyramid(c.schedule(), c.vocab, rng);
    FeatureMap acc(3, c.channels);
    accumulate_scale(acc, r.maps[0], cb);
    const Matrix in = build_scale_input(m, acc, 1, 2);
    const std::vector<int> perm = {2, 0, 3, 1};
    Matrix permuted(4, c.width);
    for (int i = 0; i < 4; ++i) {
      std::copy(in.row(perm[i]).begin(), in.row(perm[i]).end(), permuted.row(i).begin());
    }
    auto run = [&](const Matrix& block) {
      auto cache = ingest_prefix(m, cb, split_pyramid(r, 1).first, 2);
      return forward_scale(m, cache, std::span<const Matrix>(&block, 1), 1)[0];
    };
    const Matrix a = run(in);
    const Matrix b = run(permuted);
    for (int i = 0; i < 4; ++i) EXPECT_LE(max_rel_diff(b.row(i), a.row(perm[i])), 1e-5f);
  }
}

TEST(ModelTest, LaterScalesNeverChangeEarlierLogits) {
  const auto c = toy_config({1, 2, 3, 4});
  const auto s = c.schedule();
  PhiloxStream rng(99, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = toy_model(c, 200 + trial);
    const auto cb = Codebook::random(c.vocab, c.channels, trial);
    const auto r = random_pyramid(s, c.vocab, rng);
    const auto base = teacher_forced_logits(m, cb, r, 1);
    for (int j = 0; j < s.num_scales(); ++j) {
      auto flipped = r;
      for (auto& t : flipped.maps[j].tokens) t = (t + 1 + static_cast<int>(rng.below(c.vocab - 1))) % c.vocab;
      const auto out = teacher_forced_logits(m, cb, flipped, 1);
      for (int k = 0; k <= j; ++k) EXPECT_EQ(out[k], base[k]) << "flip " << j << " scale " << k;
      if (j + 1 < s.num_scales()) EXPECT_NE(out[j + 1], base[j + 1]);
    }
  }
}

TEST(ModelTest, MaskedIngestMatchesSequentialCache) {
  PhiloxStream rng(7, 0);
  for (int trial = 0; trial < 24; ++trial) {
    const auto c = toy_config({1, 2, 3, 4, 5, 6}, 1 + trial % 3, 8 * (1 + trial % 4), 2,
                              6 + trial, 2 + trial % 5);
    const auto m = toy_model(c, 300 + trial, 0.2 + 0.05 * (trial % 4));
    const auto cb = Codebook::random(c.vocab, c.channels, trial);
    const auto r = random_pyramid(c.schedule(), c.vocab, rng);
    const int cond = trial % c.cond_classes;
    for (int n = 0; n <= 6; ++n) {
      const auto seq = sequential_cache(m, cb, r, n, cond);
      const auto masked = ingest_prefix(m, cb, split_pyramid(r, n).first, cond);
      ASSERT_EQ(masked.cached_tokens(), seq.cache.cached_tokens());
      for (int l = 0; l < c.depth; ++l) {
        EXPECT_LE(max_rel_diff(masked.keys(l, 0), seq.cache.keys(l, 0)), 1e-5f);
        EXPECT_LE(max_rel_diff(masked.values(l, 0), seq.cache.values(l, 0)), 1e-5f);
      }
    }
    const auto full = teacher_forced_logits(m, cb, r, cond);
    const auto seq = sequential_cache(m, cb, r, 6, cond);
    for (int k = 0; k < 6; ++k) EXPECT_LE(max_rel_diff(full[k].data(), seq.logits[k].data()), 1e-5f);
  }
}

TEST(ModelTest, OneScaleIngestEqualsOneForward) {
  const auto c = toy_config();
  const auto m = toy_model(c, 4);
  const auto cb = Codebook::random(c.vocab, c.channels, 4);
  TokenPyramid one{c.vocab, {TokenMap(1, 3)}};
  const auto seq = sequential_cache(m, cb, one, 1, 0);
  const auto masked = ingest_prefix(m, cb, one, 0);
  for (int l = 0; l < c.depth; ++l) {
    EXPECT_LE(max_rel_diff(masked.keys(l, 0), seq.cache.keys(l, 0)), 1e-5f);
  }
}

TEST(CacheTest, EmptyPrefixHoldsConditionOnly) {
  const auto c = toy_config({1, 2}, 2, 8, 2, 6, 2);
  const auto m = toy_model(c, 1);
  auto cache = ingest_prefix(m, Codebook::random(6, 2, 0), TokenPyramid{6, {}}, 0, 4);
  EXPECT_EQ(cache.cached_tokens(), 1);
  EXPECT_EQ(cache.formula_bytes(), 128u);
  EXPECT_EQ(cache.measured_bytes(), 128u);
  EXPECT_EQ(release_cache(cache), 128u);
  EXPECT_EQ(release_cache(cache), 0u);
  EXPECT_EQ(cache.measured_bytes(), 0u);
}

TEST(CacheTest, EmptyCacheReleasesZero) {
  KVCacheState cache(2, 8, 1, 4);
  EXPECT_EQ(cache.release(), 0u);
  KVCacheState none;
  EXPECT_EQ(none.release(), 0u);
}

TEST(CacheTest, AccountingMatchesFormulaThroughDecode) {
  for (int bpe : {2, 4}) {
    const auto c = toy_config({1, 2, 3, 4}, 3, 16, 4);
    const auto m = toy_model(c, 8);
    const auto cb = Codebook::random(c.vocab, c.channels, 8);
    const std::vector<TokenPyramid> empty(3, TokenPyramid{c.vocab, {}});
    const std::vector<int> conds = {0, 1, 2};
    auto cache = ingest_prefix(m, cb, empty, conds, bpe);
    FeatureMap acc(4, c.channels);
    for (int k = 0; k < 4; ++k) {
      std::vector<Matrix> in(3, build_scale_input(m, acc, k, 0));
      forward_scale(m, cache, in, k);
      const std::size_t want = kv_bytes(3, 16, 1 + c.schedule().offset(k + 1), bpe, 3);
      EXPECT_EQ(cache.measured_bytes(), want);
      EXPECT_EQ(cache.formula_bytes(), want);
    }
    EXPECT_EQ(cache.release(), kv_bytes(3, 16, 31, bpe, 3));
  }
}

TEST(CacheTest, DefaultScheduleSixScalePrefixFreesNinetyTwoPositions) {
  auto c = toy_config(ScaleSchedule::default_schedule().patch_nums(), 2, 8, 2, 10, 2);
  const auto m = toy_model(c, 1);
  const auto cb = Codebook::random(c.vocab, c.channels, 1);
  PhiloxStream rng(1, 0);
  const auto r = random_pyramid(c.schedule(), c.vocab, rng);
  auto cache = ingest_prefix(m, cb, split_pyramid(r, 6).first, 0, 2);
  EXPECT_EQ(cache.cached_tokens(), 92);
  EXPECT_EQ(release_cache(cache), 2u * 2 * 8 * 92 * 2 * 1);
}

TEST(ScaleInputTest, FirstScaleIsClassEmbedding) {
  const auto c = toy_config();
  const auto m = toy_model(c, 6);
  const Matrix in = build_scale_input(m, FeatureMap(4, c.channels), 0, 3);
  ASSERT_EQ(in.rows(), 1u);
  for (int j = 0; j < c.width; ++j) {
    const float want = m.class_emb.data[3 * c.width + j] + m.scale_emb.data[j] + m.pos_emb.data[j];
    EXPECT_FLOAT_EQ(in(0, j), want);
  }
}

TEST(ScaleInputTest, ZeroPriorGivesEmbeddingsOnly) {
  const auto c = toy_config();
  const auto m = toy_model(c, 6);
  const auto s = c.schedule();
  for (int k = 1; k < s.num_scales(); ++k) {
    const Matrix in = build_scale_input(m, FeatureMap(4, c.channels), k, 1);
    for (int p = 0; p < s.tokens_at(k); ++p) {
      for (int j = 0; j < c.width; ++j) {
        EXPECT_EQ(in(p, j), m.scale_emb.data[k * c.width + j] +
                                m.pos_emb.data[(s.offset(k) + p) * c.width + j]);
      }
    }
  }
}

TEST(ScaleInputTest, SharedTokensDifferOnlyThroughProjection) {
  const auto c = toy_config();
  const auto drafter = toy_model(c, 10);
  auto refiner = drafter;
  refiner.input_proj = toy_model(c, 11).input_proj;
  const auto cb = Codebook::random(c.vocab, c.channels, 0);
  PhiloxStream rng(5, 0);
  const auto r = random_pyramid(c.schedule(), c.vocab, rng);
  FeatureMap acc(4, c.channels);
  accumulate_scale(acc, r.maps[0], cb);
  accumulate_scale(acc, r.maps[1], cb);
  const int k = 2;
  const Matrix a = build_scale_input(drafter, acc, k, 0);
  const Matrix b = build_scale_input(refiner, acc, k, 0);
  const FeatureMap coarse = downsample(acc, 3);
  for (int p = 0; p < 9; ++p) {
    for (int j = 0; j < c.width; ++j) {
      double want = 0;
      for (int ch = 0; ch < c.channels; ++ch) {
        want += coarse.data()[p * c.channels + ch] *
                (refiner.input_proj.data[ch * c.width + j] - drafter.input_proj.data[ch * c.width + j]);
      }
      EXPECT_NEAR(b(p, j) - a(p, j), want, 1e-5);
    }
  }
  EXPECT_NE(a, b);
}

TEST(ModelBundleTest, RandomIsReproducibleWithZeroHead) {
  const auto c = toy_config();
  const auto a = ModelBundle::random(c, 5);
  EXPECT_EQ(a, ModelBundle::random(c, 5));
  EXPECT_NE(a, ModelBundle::random(c, 6));
  for (float v : a.head_weight.data) EXPECT_EQ(v, 0.f);
  for (float v : a.layers[0].ln1_weight.data) EXPECT_EQ(v, 1.f);
  double sq = 0;
  for (float v : a.pos_emb.data) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / a.pos_emb.numel()), 0.02, 0.004);
  a.validate();
}

TEST(ModelBundleTest, ValidateCatchesShapeErrors) {
  auto m = ModelBundle::zeros(toy_config());
  m.layers[1].fc1_bias.data.pop_back();
  try {
    m.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShape);
  }
}

TEST(ModelTest, JobsDoNotChangeResults) {
  const auto c = toy_config({1, 2, 3});
  const auto m = toy_model(c, 2);
  const auto cb = Codebook::random(c.vocab, c.channels, 2);
  PhiloxStream rng(2, 0);
  std::vector<TokenPyramid> prefixes;
  std::vector<int> conds;
  for (int i = 0; i < 5; ++i) {
    prefixes.push_back(split_pyramid(random_pyramid(c.schedule(), c.vocab, rng), 2).first);
    conds.push_back(i % c.cond_classes);
  }
  const auto a = ingest_prefix(m, cb, prefixes, conds, 4, 1);
  const auto b = ingest_prefix(m, cb, prefixes, conds, 4, 3);
  for (int l = 0; l < c.depth; ++l) {
    for (int r = 0; r < 5; ++r) {
      EXPECT_TRUE(std::equal(a.keys(l, r).begin(), a.keys(l, r).end(), b.keys(l, r).begin()));
    }
  }
}

}  // namespace
}  // namespace coscale
