#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "coscale/artifact_io.h"
#include "coscale/checkpoint.h"
#include "coscale/errors.h"
#include "coscale/run_config.h"
#include "test_util.h"

namespace coscale {
namespace {

namespace fs = std::filesystem;
using testing::toy_config;

class TempDir : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() /
          (std::string("coscale_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
  }
};

using CheckpointTest = TempDir;

TEST_F(CheckpointTest, ModelRoundTripIsBitExact) {
  const auto m = testing::toy_model(toy_config({1, 2, 3}, 2, 8, 2), 5);
  save_model(m, dir / "m.ckpt");
  EXPECT_EQ(load_model(dir / "m.ckpt"), m);
  const auto h = read_checkpoint_header(dir / "m.ckpt");
  EXPECT_EQ(h.kind, "model");
  EXPECT_EQ(h.param_count, m.config.param_count());
  EXPECT_EQ(h.payload_bytes, static_cast<std::uint64_t>(m.config.param_count()) * 4);
}

TEST_F(CheckpointTest, VqRoundTripIsBitExact) {
  const auto vq = testing::toy_vq(toy_config(), 3);
  save_vq(vq, dir / "vq.ckpt");
  EXPECT_EQ(load_vq(dir / "vq.ckpt"), vq);
  EXPECT_THROW(load_model(dir / "vq.ckpt"), Error);
}

TEST_F(CheckpointTest, SameSeedGivesIdenticalFiles) {
  const auto c = toy_config();
  init_random_checkpoint(c, 9, dir / "a.ckpt");
  init_random_checkpoint(c, 9, dir / "b.ckpt");
  init_random_checkpoint(c, 10, dir / "c.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_NE(slurp(dir / "a.ckpt"), slurp(dir / "c.ckpt"));
  const auto m = load_model(dir / "a.ckpt");
  for (float v : m.head_weight.data) EXPECT_EQ(v, 0.f);
}

TEST_F(CheckpointTest, PresetHeaderParamCount) {
  // Header only; avoid writing ~1 GB of payload by checking the counted formula.
  const auto c = ModelConfig::preset("d16");
  const std::int64_t w = c.width, d = c.depth;
  const std::int64_t embeddings = c.channels * w + (c.cond_classes + 1) * w + w + 10 * w + 680 * w;
  const std::int64_t head = w * c.vocab + c.vocab + 2 * w;
  EXPECT_EQ(c.param_count(), d * (12 * w * w + 13 * w) + embeddings + head);
  const auto j = config_to_json(c);
  EXPECT_EQ(config_from_json(j), c);
}

TEST_F(CheckpointTest, UnwritablePathIsIoError) {
  try {
    init_random_checkpoint(toy_config(), 1, dir / "missing" / "x.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

TEST_F(CheckpointTest, MissingFileIsMissingArtifact) {
  try {
    load_model(dir / "nope.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
}

// Rewrites the JSON header of a saved checkpoint, keeping the payload.
std::string with_header(const std::string& file, const nlohmann::json& header) {
  std::uint64_t len = 0;
  std::memcpy(&len, file.data() + 8, 8);
  const std::string text = header.dump();
  std::string out = file.substr(0, 8);
  const std::uint64_t new_len = text.size();
  out.append(reinterpret_cast<const char*>(&new_len), 8);
  out += text;
  out += file.substr(16 + len);
  return out;
}

nlohmann::json header_of(const std::string& file) {
  std::uint64_t len = 0;
  std::memcpy(&len, file.data() + 8, 8);
  return nlohmann::json::parse(file.substr(16, len));
}

TEST_F(CheckpointTest, CorruptionIsDetectedBeforeReadingTensors) {
  const auto m = testing::toy_model(toy_config({1, 2}, 1, 8, 2), 5);
  save_model(m, dir / "ok.ckpt");
  const std::string good = slurp(dir / "ok.ckpt");
  const auto h = header_of(good);

  std::vector<std::pair<std::string, std::string>> cases;
  {
    auto j = h;
    j["tensors"][1]["offset"] = j["tensors"][0]["offset"];  // overlap
    cases.emplace_back("overlap", with_header(good, j));
  }
  {
    auto j = h;
    j["tensors"][2]["offset"] = j["tensors"][2]["offset"].get<std::uint64_t>() + 4;  // gap
    cases.emplace_back("gap", with_header(good, j));
  }
  {
    auto j = h;
    j["tensors"].back()["offset"] = 1ull << 40;  // out of bounds
    cases.emplace_back("oob", with_header(good, j));
  }
  {
    auto j = h;
    j["tensors"][0]["nbytes"] = j["tensors"][0]["nbytes"].get<std::uint64_t>() + 4;  // size vs shape
    cases.emplace_back("nbytes", with_header(good, j));
  }
  {
    auto j = h;
    j["format_version"] = 2;
    cases.emplace_back("version", with_header(good, j));
  }
  cases.emplace_back("truncated", good.substr(0, good.size() - 3));
  cases.emplace_back("magic", "XSCK" + good.substr(4));
  cases.emplace_back("header_len", good.substr(0, 8) + std::string(8, '\xff') + good.substr(16));
  cases.emplace_back("empty", "");
  {
    std::string v = good;
    v[4] = 7;
    cases.emplace_back("version_word", v);
  }

  for (const auto& [name, bytes] : cases) {
    spit(dir / "bad.ckpt", bytes);
    try {
      read_checkpoint_header(dir / "bad.ckpt");
      ADD_FAILURE() << name << " not detected by header validation";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kCorruptCheckpoint) << name << ": " << e.what();
    }
    EXPECT_THROW(load_model(dir / "bad.ckpt"), Error) << name;
  }
}

TEST_F(CheckpointTest, PayloadFlipChangesWeightsOnly) {
  const auto m = testing::toy_model(toy_config({1, 2}, 1, 8, 2), 5);
  save_model(m, dir / "ok.ckpt");
  std::string bytes = slurp(dir / "ok.ckpt");
  bytes[bytes.size() - 1] ^= 0x01;
  spit(dir / "flip.ckpt", bytes);
  EXPECT_NE(load_model(dir / "flip.ckpt"), m);
}

using ConfigTest = TempDir;

TEST_F(ConfigTest, MinimalConfigTakesRecipeDefaults) {
  const auto cfg = parse_run_config("vqvae: vq.ckpt\ndrafter: d.ckpt\nrefiner: r.ckpt\n", "/base");
  EXPECT_EQ(cfg.schedule, ScaleSchedule::default_schedule());
  EXPECT_EQ(cfg.plan.partition_n, 6);
  EXPECT_EQ(cfg.plan.sampler.top_k, 600);
  EXPECT_EQ(cfg.plan.sampler.top_p, 0.96);
  EXPECT_EQ(cfg.plan.sampler.temperature(6), 1.1);
  EXPECT_EQ(cfg.plan.sampler.temperature(7), 1.0);
  EXPECT_FALSE(cfg.plan.cfg_scale.has_value());
  EXPECT_EQ(cfg.vqvae, fs::path("/base/vq.ckpt"));
  EXPECT_EQ(cfg.output.dir, fs::path("/base"));
  EXPECT_EQ(cfg.batch(), 1);
}

TEST_F(ConfigTest, FullConfig) {
  const auto cfg = parse_run_config(R"(
schedule: [1, 2, 3, 4]
vqvae: /abs/vq.ckpt
drafter: d.ckpt
refiner: r.ckpt
plan:
  partition_n: 2
  seed: 123
  cfg_scale: 1.5
  sampler:
    top_k: 5
    top_p: 0.5
    temperatures: [2.0, 1.0]
    greedy: false
classes: [1, 2, 3]
bytes_per_element: 2
jobs: 2
output:
  dir: out
  prefix: run
  png: false
)",
                                    "/b");
  EXPECT_EQ(cfg.schedule.num_scales(), 4);
  EXPECT_EQ(cfg.vqvae, fs::path("/abs/vq.ckpt"));
  EXPECT_EQ(cfg.plan.assignment, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_EQ(cfg.plan.seed, 123u);
  EXPECT_EQ(*cfg.plan.cfg_scale, 1.5);
  EXPECT_EQ(cfg.plan.sampler.top_k, 5);
  EXPECT_EQ(cfg.plan.sampler.temperature(0), 2.0);
  EXPECT_EQ(cfg.classes, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(cfg.bytes_per_element, 2);
  EXPECT_EQ(cfg.jobs, 2);
  EXPECT_EQ(cfg.output.dir, fs::path("/b/out"));
  EXPECT_FALSE(cfg.output.png);
}

TEST_F(ConfigTest, DiagnosticsAreLocated) {
  struct Case {
    std::string text;
    std::string needle;
  };
  const std::vector<Case> cases = {
      {"vqvae: a\ndrafter: b\nplan:\n  partition_n: 3\n", "line 4, field 'plan.partition_n'"},
      {"vqvae: a\ndrafter: b\nbogus: 1\n", "line 3, field '<root>': unknown key 'bogus'"},
      {"vqvae: a\ndrafter: b\nschedule: [2, 1]\n", "field 'schedule'"},
      {"vqvae: a\ndrafter: b\nrefiner: c\nplan:\n  sampler:\n    top_p: 1.5\n", "field 'plan.sampler'"},
      {"vqvae: a\ndrafter: b\njobs: many\n", "line 3, field 'jobs'"},
      {"drafter: b\n", "field 'vqvae': required"},
      {"vqvae: a\ndrafter: b\nbytes_per_element: 3\n", "line 3, field 'bytes_per_element'"},
      {"vqvae: [a\n", "field '<document>'"},
      {"- 1\n- 2\n", "field '<root>'"},
  };
  for (const auto& c : cases) {
    try {
      parse_run_config(c.text);
      ADD_FAILURE() << "accepted: " << c.text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kConfig);
      EXPECT_NE(std::string(e.what()).find(c.needle), std::string::npos) << e.what();
    }
  }
}

TEST_F(ConfigTest, RandomBytesNeverCrash) {
  PhiloxStream rng(1, 0);
  const std::string valid = "vqvae: a\ndrafter: b\nrefiner: c\nplan: {partition_n: 4, seed: 2}\n";
  const std::string alphabet = "abcdefgpqrstvxyz_:-[]{},.0123456789 \n\t#'\"!&*|>%@`";
  int parsed = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    std::string text;
    if (trial % 3 == 0) {
      text = valid;
      const int edits = 1 + rng.below(4);
      for (int e = 0; e < edits; ++e) text[rng.below(text.size())] = alphabet[rng.below(alphabet.size())];
    } else if (trial % 3 == 1) {
      for (int i = 0, n = rng.below(120); i < n; ++i) text.push_back(alphabet[rng.below(alphabet.size())]);
    } else {
      for (int i = 0, n = rng.below(120); i < n; ++i) text.push_back(static_cast<char>(rng.below(256)));
    }
    try {
      parse_run_config(text);
      ++parsed;
    } catch (const Error& e) {
      ASSERT_EQ(e.kind(), ErrorKind::kConfig);
      ASSERT_NE(std::string(e.what()).find("field '"), std::string::npos) << e.what();
    }
  }
  EXPECT_GT(parsed, 0);
}

TEST_F(ConfigTest, MissingArtifactsAndSeedOverride) {
  spit(dir / "vq.ckpt", "x");
  spit(dir / "d.ckpt", "x");
  spit(dir / "run.yaml", "vqvae: vq.ckpt\ndrafter: d.ckpt\nrefiner: r.ckpt\nplan: {seed: 5}\n");
  auto cfg = load_run_config(dir / "run.yaml");
  try {
    check_artifacts(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
  spit(dir / "r.ckpt", "x");
  check_artifacts(cfg);
  EXPECT_EQ(cfg.plan.seed, 5u);
  apply_seed_override(cfg, "77");
  EXPECT_EQ(cfg.plan.seed, 77u);
  apply_seed_override(cfg, nullptr);
  EXPECT_EQ(cfg.plan.seed, 77u);
  EXPECT_THROW(apply_seed_override(cfg, "-1"), Error);
  EXPECT_THROW(apply_seed_override(cfg, "12x"), Error);
  try {
    load_run_config(dir / "absent.yaml");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

using ArtifactTest = TempDir;

TEST_F(ArtifactTest, PyramidJsonRoundTrip) {
  PhiloxStream rng(1, 0);
  const auto r = testing::random_pyramid(ScaleSchedule::default_schedule(), 40, rng);
  const auto j = pyramid_to_json(r);
  EXPECT_EQ(j["patch_nums"], ScaleSchedule::default_schedule().patch_nums());
  EXPECT_EQ(pyramid_from_json(nlohmann::json::parse(j.dump())), r);
  auto bad = j;
  bad["maps"][1][0][0] = 40;
  EXPECT_THROW(pyramid_from_json(bad), Error);
  bad = j;
  bad["maps"][2][0].erase(0);
  EXPECT_THROW(pyramid_from_json(bad), Error);
  EXPECT_THROW(pyramid_from_json(nlohmann::json::object()), Error);
}

TEST_F(ArtifactTest, PpmRoundTripAndMask) {
  Image img(3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<float>(i % 4) / 3.f;
  img.at(0, 0, 1) = img.at(0, 0, 2) = 0.f;
  write_ppm(img, dir / "a.ppm");
  const auto back = read_ppm(dir / "a.ppm");
  for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_NEAR(back.rgb[i], img.rgb[i], 0.5 / 255);

  spit(dir / "m.pgm", "P2\n# comment\n3 3\n255\n0 0 0\n0 9 0\n0 0 255\n");
  const auto m = read_mask(dir / "m.pgm");
  EXPECT_EQ(m.inside, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 0, 0, 0, 1}));
  const auto pm = read_mask(dir / "a.ppm");
  EXPECT_EQ(pm.side, 3);
  EXPECT_FALSE(pm.at(0, 0));
  EXPECT_TRUE(pm.at(0, 1));
  spit(dir / "bad.pgm", "P2\n3 2\n255\n0 0 0 0 0 0\n");
  EXPECT_THROW(read_mask(dir / "bad.pgm"), Error);
  spit(dir / "bad2.pgm", "P7\n");
  EXPECT_THROW(read_mask(dir / "bad2.pgm"), Error);
  try {
    read_mask(dir / "none.pgm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingArtifact);
  }
}

TEST_F(ArtifactTest, PngWriterProducesSignature) {
  Image img(4);
  if (write_png(img, dir / "a.png")) {
    EXPECT_EQ(slurp(dir / "a.png").substr(1, 3), "PNG");
  } else {
    GTEST_SKIP() << "built without PNG support";
  }
}

TEST_F(ArtifactTest, StatsJsonHasHandoffFields) {
  DecodeStats s;
  s.handoffs.push_back({6, 0, 1, 1024, 92, 0.5});
  s.handoff_freed_bytes = 1024;
  const auto j = stats_to_json(s);
  EXPECT_EQ(j["freed_bytes"], 1024);
  EXPECT_EQ(j["handoffs"][0]["ingested_positions"], 92);
}

TEST_F(ArtifactTest, LossFixtureChecker) {
  const auto fixture = nlohmann::json::parse(R"({"cases": [
    {"name": "uniform", "kind": "drafter", "n": 1, "logits": [[[0, 0, 0, 0]]], "targets": [[2]],
     "expected_loss": 1.3862943611198906, "expected_grad": [[[0.25, 0.25, -0.75, 0.25]]]},
    {"name": "wrong", "kind": "drafter", "n": 1, "logits": [[[0, 0, 0, 0]]], "targets": [[2]],
     "expected_loss": 1.0, "expected_grad": [[[0.25, 0.25, -0.75, 0.25]]]},
    {"name": "kl", "kind": "refiner", "n": 0, "ep": 0, "total_ep": 1,
     "student": [[[1, 2]]], "teacher": [[[1, 2]]], "expected_loss": 0.0,
     "expected_grad": [[[0, 0]]]}]})");
  const auto out = check_loss_fixtures(fixture);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_TRUE(out[0].passed);
  EXPECT_FALSE(out[1].passed);
  EXPECT_TRUE(out[2].passed);
  EXPECT_THROW(check_loss_fixtures(nlohmann::json::parse(R"({"cases": [{"kind": "x"}]})")), Error);
}

}  // namespace
}  // namespace coscale
