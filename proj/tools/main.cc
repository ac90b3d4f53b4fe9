#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if __has_include(<CLI/CLI.hpp>)
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif
#include <nlohmann/json.hpp>

#include "coscale/analysis.h"
#include "coscale/artifact_io.h"
#include "coscale/checkpoint.h"
#include "coscale/errors.h"
#include "coscale/model.h"
#include "coscale/orchestrator.h"
#include "coscale/run_config.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace coscale {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;
constexpr int kExitInvariant = 4;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kInsufficientSamples:
      return kExitUsage;
    case ErrorKind::kMissingArtifact:
    case ErrorKind::kIo:
      return kExitMissing;
    default:
      return kExitInvariant;
  }
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::kConfig, flag + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) fail(ErrorKind::kConfig, flag + ": empty list");
  return out;
}

// Loaded models of a run config plus its resolved plan.
struct Session {
  RunConfig cfg;
  VqModel vq;
  ModelBundle drafter;
  std::optional<ModelBundle> refiner;

  std::vector<const ModelBundle*> models() const {
    std::vector<const ModelBundle*> out = {&drafter};
    if (refiner) out.push_back(&*refiner);
    return out;
  }
  DecodeOptions options() const { return {cfg.bytes_per_element, cfg.jobs, 0}; }
};

Session open_session(const fs::path& config, int jobs) {
  Session s;
  s.cfg = load_run_config(config);
  apply_seed_override(s.cfg, std::getenv("COSCALE_SEED"));
  if (jobs > 0) s.cfg.jobs = jobs;
  check_artifacts(s.cfg);
  s.vq = load_vq(s.cfg.vqvae);
  s.drafter = load_model(s.cfg.drafter);
  if (s.cfg.refiner) s.refiner = load_model(*s.cfg.refiner);
  for (const ModelBundle* m : s.models()) {
    if (m->config.patch_nums != s.cfg.schedule.patch_nums()) {
      fail(ErrorKind::kConfig, "checkpoint schedule differs from the config schedule");
    }
  }
  for (int c : s.cfg.classes) {
    if (c >= s.drafter.config.cond_classes) {
      fail(ErrorKind::kConfig, "class id " + std::to_string(c) + " exceeds the model's " +
                                   std::to_string(s.drafter.config.cond_classes) + " classes");
    }
  }
  return s;
}

GenerationResult run_decode(const Session& s) {
  if (!s.refiner) return decode_vanilla(s.drafter, s.vq, s.cfg.classes, s.cfg.plan, s.options());
  return decode_collaborative(s.drafter, *s.refiner, s.vq, s.cfg.classes, s.cfg.plan,
                              s.options());
}

void write_outputs(const Session& s, const GenerationResult& result) {
  const OutputConfig& out = s.cfg.output;
  fs::create_directories(out.dir);
  const fs::path base = out.dir / out.prefix;
  json pyramids = json::array();
  for (std::size_t b = 0; b < result.pyramids.size(); ++b) {
    pyramids.push_back(pyramid_to_json(result.pyramids[b]));
    const std::string stem = base.string() + "_" + std::to_string(b);
    write_ppm(result.images[b], stem + ".ppm");
    if (out.png && !write_png(result.images[b], stem + ".png")) {
      std::cerr << "note: PNG support not compiled in, wrote PPM only\n";
    }
  }
  json tokens = {{"classes", s.cfg.classes}, {"seed", s.cfg.plan.seed}, {"pyramids", pyramids}};
  write_text(base.string() + "_tokens.json", tokens.dump(1) + "\n");
  json stats = stats_to_json(result.stats);
  stats["partition_n"] = s.cfg.plan.partition_n;
  stats["jobs"] = s.cfg.jobs;
  write_text(base.string() + "_stats.json", stats.dump(1) + "\n");
  std::cout << "wrote " << result.pyramids.size() << " sample(s) to " << out.dir.string() << "\n";
}

// A single pyramid object, or {"pyramids": [...]} as written by generate.
TokenPyramid load_pyramid(const fs::path& path, int index) {
  const json j = read_json(path);
  if (j.is_object() && j.contains("pyramids")) {
    const json& list = j.at("pyramids");
    if (!list.is_array() || index < 0 || index >= static_cast<int>(list.size())) {
      fail(ErrorKind::kConfig, path.string() + ": no pyramid at index " + std::to_string(index));
    }
    return pyramid_from_json(list[index]);
  }
  return pyramid_from_json(j);
}

ModelConfig model_from_arg(const std::string& arg) {
  for (const char* name : {"d16", "d20", "d24", "d30"}) {
    if (arg == name) return ModelConfig::preset(arg);
  }
  return config_from_json(read_checkpoint_header(arg).config);
}

int cmd_generate(const fs::path& config, int jobs) {
  const Session s = open_session(config, jobs);
  write_outputs(s, run_decode(s));
  return kExitOk;
}

struct MemplanArgs {
  std::string drafter = "d30";
  std::string refiner = "d16";
  int partition = 6;
  std::string batches = "8,16,32,64";
  int bpe = 2;
  int cfg_factor = 2;
  bool as_json = false;
};

int cmd_memplan(const MemplanArgs& a) {
  const ModelConfig d = model_from_arg(a.drafter);
  const ModelConfig r = model_from_arg(a.refiner);
  if (d.patch_nums != r.patch_nums) fail(ErrorKind::kConfig, "models use different schedules");
  const ScaleSchedule schedule = d.schedule();
  if (a.partition < 0 || a.partition > schedule.num_scales()) {
    fail(ErrorKind::kConfig, "--partition must lie in [0, " +
                                 std::to_string(schedule.num_scales()) + "]");
  }
  if (a.bpe != 2 && a.bpe != 4) fail(ErrorKind::kConfig, "--bpe must be 2 or 4");
  if (a.cfg_factor != 1 && a.cfg_factor != 2) fail(ErrorKind::kConfig, "--cfg-factor must be 1 or 2");
  const std::vector<int> batches = parse_int_list(a.batches, "--batch");
  for (int b : batches) {
    if (b < 1) fail(ErrorKind::kConfig, "--batch entries must be positive");
  }
  const auto rows = analysis::memory_table(d, r, schedule, batches, a.partition,
                                           analysis::MemoryOptions{1, a.bpe, a.cfg_factor, 4});
  if (a.as_json) {
    json out = json::array();
    for (const auto& row : rows) {
      out.push_back({{"batch", row.batch},
                     {"vanilla", memory_report_to_json(row.vanilla)},
                     {"collaborative", memory_report_to_json(row.collaborative)},
                     {"kv_ratio", row.kv_ratio()}});
    }
    std::cout << out.dump(1) << "\n";
  } else {
    std::cout << analysis::format_memory_table(rows);
  }
  return kExitOk;
}

int cmd_bench(const fs::path& config, int warmup, int repetitions, int jobs,
              const std::string& json_out) {
  if (warmup < analysis::kMinWarmup || repetitions < analysis::kMinRepetitions) {
    // Reject before loading anything so a bad count never costs a decode.
    analysis::profile_latency([] { return DecodeStats{}; }, warmup, repetitions);
  }
  const Session s = open_session(config, jobs);
  const auto collab = analysis::profile_latency([&] { return run_decode(s).stats; }, warmup,
                                              repetitions);
  json out = {{"collaborative", latency_report_to_json(collab)}};
  std::printf("%-6s %12s %12s\n", "scale", "mean_s", "stddev_s");
  for (std::size_t k = 0; k < collab.scale_mean.size(); ++k) {
    std::printf("%-6zu %12.6f %12.6f\n", k, collab.scale_mean[k], collab.scale_stddev[k]);
  }
  std::printf("decode %.6f s, handoff ingest %.6f s, last three scales %.1f%%\n",
              collab.decode_mean, collab.ingest_mean, 100.0 * collab.last_three_fraction);
  if (s.refiner && s.cfg.plan.partition_n < s.cfg.schedule.num_scales()) {
    const DecodePlan plan = DecodePlan::single(s.cfg.schedule, s.cfg.plan.sampler, s.cfg.plan.seed);
    const auto vanilla = analysis::profile_latency(
        [&] { return decode_vanilla(s.drafter, s.vq, s.cfg.classes, plan, s.options()).stats; },
        warmup, repetitions);
    const double speedup = vanilla.scale_mean.back() / collab.scale_mean.back();
    std::printf("vanilla decode %.6f s, final-scale speedup %.3fx\n", vanilla.decode_mean,
                speedup);
    out["vanilla"] = latency_report_to_json(vanilla);
    out["final_scale_speedup"] = speedup;
  }
  if (!json_out.empty()) write_text(json_out, out.dump(1) + "\n");
  return kExitOk;
}

struct SpectrumArgs {
  std::string pyramid;
  std::string vqvae;
  std::string scales;
  std::string out_dir;
  int index = 0;
};

int cmd_spectrum(const SpectrumArgs& a) {
  const TokenPyramid r = load_pyramid(a.pyramid, a.index);
  const VqModel vq = load_vq(a.vqvae);
  std::vector<int> sides;
  for (const TokenMap& m : r.maps) sides.push_back(m.side);
  const ScaleSchedule schedule = ScaleSchedule::build(sides);
  validate_pyramid(r, schedule);
  if (r.vocab_size != vq.codebook.vocab()) fail(ErrorKind::kConfig, "pyramid vocab differs from the codebook");
  std::vector<int> scales;
  if (a.scales.empty()) {
    for (int k = 0; k < r.num_scales(); ++k) scales.push_back(k);
  } else {
    scales = parse_int_list(a.scales, "--scales");
  }
  for (int k : scales) {
    if (k < 0 || k >= r.num_scales()) fail(ErrorKind::kConfig, "--scales: no scale " + std::to_string(k));
  }
  if (a.out_dir.empty() && scales.size() != 1) {
    fail(ErrorKind::kConfig, "several scales need --out-dir");
  }
  for (int k : scales) {
    const std::string csv = analysis::spectrum_csv(
        analysis::radial_spectrum(analysis::scale_contribution(r, k, vq.codebook, schedule)));
    if (a.out_dir.empty()) {
      std::cout << csv;
    } else {
      fs::create_directories(a.out_dir);
      write_text(fs::path(a.out_dir) / ("spectrum_scale" + std::to_string(k) + ".csv"), csv);
    }
  }
  return kExitOk;
}

struct EditArgs {
  std::string config;
  std::string gt;
  std::string mask;
  std::string box;
  int index = 0;
  int jobs = 0;
};

int cmd_teacher_forced(const EditArgs& a, bool use_box) {
  Session s = open_session(a.config, a.jobs);
  const TokenPyramid gt = load_pyramid(a.gt, a.index);
  validate_pyramid(gt, s.cfg.schedule);
  const std::vector<const ModelBundle*> models = s.models();
  GenerationResult result;
  if (use_box) {
    const std::vector<int> v = parse_int_list(a.box, "--box");
    if (v.size() != 4) fail(ErrorKind::kConfig, "--box takes x0,y0,x1,y1");
    const BoundingBox box{v[0], v[1], v[2], v[3]};
    const int side = s.cfg.schedule.final_side();
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > side || box.y1 > side || box.x0 > box.x1 ||
        box.y0 > box.y1) {
      fail(ErrorKind::kConfig, "--box must lie inside the " + std::to_string(side) + "x" +
                                   std::to_string(side) + " token grid");
    }
    result = edit_box(models, s.vq, s.cfg.classes, gt, box, s.cfg.plan, s.options());
  } else {
    const Mask mask = read_mask(a.mask);
    if (mask.side != s.cfg.schedule.final_side()) {
      fail(ErrorKind::kConfig, "mask must be " + std::to_string(s.cfg.schedule.final_side()) +
                                   " pixels square, got " + std::to_string(mask.side));
    }
    result = inpaint(models, s.vq, s.cfg.classes, gt, mask, s.cfg.plan, s.options());
  }
  write_outputs(s, result);
  return kExitOk;
}

int cmd_check_losses(const fs::path& fixtures) {
  const auto outcomes = check_loss_fixtures(read_json(fixtures));
  int failed = 0;
  for (const auto& o : outcomes) {
    std::printf("%-4s %-20s loss_err %.3e  max_grad_err %.3e\n", o.passed ? "ok" : "FAIL",
                o.name.c_str(), o.loss_error, o.max_grad_error);
    if (!o.passed) ++failed;
  }
  std::printf("%zu fixtures, %d failed\n", outcomes.size(), failed);
  return failed == 0 ? kExitOk : kExitInvariant;
}

struct InitArgs {
  std::string kind = "model";
  std::string preset;
  std::string out;
  std::uint64_t seed = 0;
  int depth = 2, width = 32, heads = 2, vocab = 64, classes = 10, channels = 8;
  std::string patch_nums = "1,2,3,4";
};

int cmd_init_ckpt(const InitArgs& a) {
  if (a.kind == "vqvae") {
    if (a.vocab < 1 || a.channels < 1) fail(ErrorKind::kConfig, "--vocab and --channels must be positive");
    VqModel vq{Codebook::random(a.vocab, a.channels, a.seed),
               DecoderWeights::random(a.channels, a.seed)};
    save_vq(vq, a.out);
    std::cout << "wrote vqvae V=" << a.vocab << " C=" << a.channels << " to " << a.out << "\n";
    return kExitOk;
  }
  ModelConfig c;
  if (!a.preset.empty()) {
    c = ModelConfig::preset(a.preset);
  } else {
    c.depth = a.depth;
    c.width = a.width;
    c.heads = a.heads;
    c.vocab = a.vocab;
    c.cond_classes = a.classes;
    c.channels = a.channels;
    c.patch_nums = parse_int_list(a.patch_nums, "--patch-nums");
  }
  try {
    c.validate();
    (void)c.schedule();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, e.what());
  }
  init_random_checkpoint(c, a.seed, a.out);
  std::cout << "wrote model with " << c.param_count() << " parameters to " << a.out << "\n";
  return kExitOk;
}

int run(int argc, char** argv) {
  CLI::App app{"Collaborative next-scale decoding: drafter/refiner generation and analysis"};
  app.require_subcommand(1);

  std::string config;
  int jobs = 0;
  auto* gen = app.add_subcommand("generate", "Decode images from a run config");
  gen->add_option("config", config, "YAML run config")->required();
  gen->add_option("--jobs", jobs, "Concurrent generation streams (overrides the config)")
      ->check(CLI::Range(1, 256));

  MemplanArgs mp;
  auto* mem = app.add_subcommand("memplan", "Predicted KV/params/total memory, vanilla vs collaborative");
  mem->add_option("--drafter", mp.drafter, "Preset (d16|d20|d24|d30) or checkpoint")->capture_default_str();
  mem->add_option("--refiner", mp.refiner, "Preset or checkpoint")->capture_default_str();
  mem->add_option("--partition", mp.partition, "Scales drafted before the handoff")->capture_default_str();
  mem->add_option("--batch", mp.batches, "Comma-separated batch sizes")->capture_default_str();
  mem->add_option("--bpe", mp.bpe, "KV bytes per element")->capture_default_str();
  mem->add_option("--cfg-factor", mp.cfg_factor, "2 when decoding with guidance")->capture_default_str();
  mem->add_flag("--json", mp.as_json, "Emit JSON instead of a table");

  int warmup = analysis::kMinWarmup, reps = analysis::kMinRepetitions;
  std::string bench_json;
  auto* bench = app.add_subcommand("bench", "Per-scale latency profile of a run config");
  bench->add_option("config", config, "YAML run config")->required();
  bench->add_option("--warmup", warmup, "Unmeasured runs")->capture_default_str();
  bench->add_option("--repetitions", reps, "Measured runs")->capture_default_str();
  bench->add_option("--jobs", jobs, "Concurrent generation streams")->check(CLI::Range(1, 256));
  bench->add_option("--json", bench_json, "Write the report as JSON");

  SpectrumArgs sp;
  auto* spectrum = app.add_subcommand("spectrum", "Radial power spectrum of per-scale contributions");
  spectrum->add_option("--pyramid", sp.pyramid, "Token pyramid JSON")->required();
  spectrum->add_option("--vqvae", sp.vqvae, "Codebook checkpoint")->required();
  spectrum->add_option("--scales", sp.scales, "Comma-separated scale indices (default all)");
  spectrum->add_option("--index", sp.index, "Pyramid index in a multi-sample file")->capture_default_str();
  spectrum->add_option("--out-dir", sp.out_dir, "Write one CSV per scale here");

  EditArgs ia;
  auto* inp = app.add_subcommand("inpaint", "Regenerate the masked region of a pyramid");
  inp->add_option("config", ia.config, "YAML run config")->required();
  inp->add_option("--gt", ia.gt, "Ground-truth token pyramid JSON")->required();
  inp->add_option("--mask", ia.mask, "PGM/PPM mask at final token resolution")->required();
  inp->add_option("--index", ia.index, "Pyramid index in a multi-sample file")->capture_default_str();
  inp->add_option("--jobs", ia.jobs, "Concurrent generation streams")->check(CLI::Range(1, 256));

  EditArgs ea;
  auto* edit = app.add_subcommand("edit", "Regenerate a box of a pyramid under the config classes");
  edit->add_option("config", ea.config, "YAML run config")->required();
  edit->add_option("--gt", ea.gt, "Ground-truth token pyramid JSON")->required();
  edit->add_option("--box", ea.box, "x0,y0,x1,y1 in final token cells")->required();
  edit->add_option("--index", ea.index, "Pyramid index in a multi-sample file")->capture_default_str();
  edit->add_option("--jobs", ea.jobs, "Concurrent generation streams")->check(CLI::Range(1, 256));

  std::string fixtures;
  auto* chk = app.add_subcommand("check-losses", "Check loss kernels against a fixture file");
  chk->add_option("fixtures", fixtures, "Loss fixture JSON")->required();

  InitArgs in;
  auto* init = app.add_subcommand("init-ckpt", "Write a randomly initialized checkpoint");
  init->add_option("--kind", in.kind, "model or vqvae")->capture_default_str()->check(CLI::IsMember({"model", "vqvae"}));
  init->add_option("--preset", in.preset, "d16|d20|d24|d30");
  init->add_option("--out", in.out, "Output path")->required();
  init->add_option("--seed", in.seed, "Initialization seed")->capture_default_str();
  init->add_option("--depth", in.depth, "")->capture_default_str();
  init->add_option("--width", in.width, "")->capture_default_str();
  init->add_option("--heads", in.heads, "")->capture_default_str();
  init->add_option("--vocab", in.vocab, "")->capture_default_str();
  init->add_option("--classes", in.classes, "")->capture_default_str();
  init->add_option("--channels", in.channels, "")->capture_default_str();
  init->add_option("--patch-nums", in.patch_nums, "Comma-separated scale sides")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(config, jobs);
    if (mem->parsed()) return cmd_memplan(mp);
    if (bench->parsed()) return cmd_bench(config, warmup, reps, jobs, bench_json);
    if (spectrum->parsed()) return cmd_spectrum(sp);
    if (inp->parsed()) return cmd_teacher_forced(ia, false);
    if (edit->parsed()) return cmd_teacher_forced(ea, true);
    if (chk->parsed()) return cmd_check_losses(fixtures);
    if (init->parsed()) return cmd_init_ckpt(in);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitUsage;
}

}  // namespace
}  // namespace coscale

int main(int argc, char** argv) { return coscale::run(argc, argv); }
