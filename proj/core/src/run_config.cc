#include "coscale/run_config.h"

#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "coscale/errors.h"

namespace coscale {
namespace {

[[noreturn]] void config_error(const YAML::Mark& mark, const std::string& field,
                               const std::string& what) {
  std::string where = mark.is_null() ? std::string("line ?") : "line " + std::to_string(mark.line + 1);
  fail(ErrorKind::kConfig, where + ", field '" + field + "': " + what);
}

template <typename T>
T get(const YAML::Node& node, const std::string& field) {
  if (!node.IsScalar()) config_error(node.Mark(), field, "expected a scalar");
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    config_error(node.Mark(), field, "cannot parse '" + node.Scalar() + "'");
  }
}

template <typename T>
std::vector<T> get_list(const YAML::Node& node, const std::string& field) {
  if (!node.IsSequence()) config_error(node.Mark(), field, "expected a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < node.size(); ++i) {
    out.push_back(get<T>(node[i], field + "[" + std::to_string(i) + "]"));
  }
  return out;
}

void check_keys(const YAML::Node& node, const std::string& field,
                const std::set<std::string>& allowed) {
  if (!node.IsMap()) config_error(node.Mark(), field, "expected a mapping");
  for (const auto& kv : node) {
    if (!kv.first.IsScalar()) config_error(kv.first.Mark(), field, "keys must be scalars");
    const std::string key = kv.first.Scalar();
    if (!allowed.count(key)) config_error(kv.first.Mark(), field, "unknown key '" + key + "'");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

void parse_sampler(const YAML::Node& node, SamplerConfig& s) {
  check_keys(node, "plan.sampler", {"top_k", "top_p", "temperatures", "greedy"});
  if (node["top_k"]) s.top_k = get<int>(node["top_k"], "plan.sampler.top_k");
  if (node["top_p"]) s.top_p = get<double>(node["top_p"], "plan.sampler.top_p");
  if (node["temperatures"]) {
    s.temp_schedule = get_list<double>(node["temperatures"], "plan.sampler.temperatures");
  }
  if (node["greedy"]) s.greedy = get<bool>(node["greedy"], "plan.sampler.greedy");
  try {
    s.validate();
  } catch (const Error& e) {
    config_error(node.Mark(), "plan.sampler", e.what());
  }
}

RunConfig parse_root(const YAML::Node& root, const std::filesystem::path& base) {
  if (!root.IsMap()) config_error(root.Mark(), "<root>", "expected a mapping at top level");
  check_keys(root, "<root>",
             {"schedule", "vqvae", "drafter", "refiner", "plan", "class", "classes", "batch",
              "bytes_per_element", "jobs", "output"});
  RunConfig cfg;
  cfg.output.dir = base;

  if (root["schedule"]) {
    const auto pn = get_list<int>(root["schedule"], "schedule");
    try {
      cfg.schedule = ScaleSchedule::build(pn);
    } catch (const Error& e) {
      config_error(root["schedule"].Mark(), "schedule", e.what());
    }
  }
  const int K = cfg.schedule.num_scales();

  if (!root["vqvae"]) config_error(root.Mark(), "vqvae", "required");
  if (!root["drafter"]) config_error(root.Mark(), "drafter", "required");
  cfg.vqvae = resolve(base, get<std::string>(root["vqvae"], "vqvae"));
  cfg.drafter = resolve(base, get<std::string>(root["drafter"], "drafter"));
  if (root["refiner"]) cfg.refiner = resolve(base, get<std::string>(root["refiner"], "refiner"));

  SamplerConfig sampler = SamplerConfig::recipe(K);
  int n = cfg.refiner ? std::min(6, K) : K;
  std::uint64_t seed = 0;
  std::optional<double> cfg_scale;
  if (const YAML::Node plan = root["plan"]) {
    check_keys(plan, "plan", {"partition_n", "seed", "cfg_scale", "sampler"});
    if (plan["partition_n"]) n = get<int>(plan["partition_n"], "plan.partition_n");
    if (plan["seed"]) seed = get<std::uint64_t>(plan["seed"], "plan.seed");
    if (plan["cfg_scale"] && !plan["cfg_scale"].IsNull()) {
      cfg_scale = get<double>(plan["cfg_scale"], "plan.cfg_scale");
    }
    if (plan["sampler"]) parse_sampler(plan["sampler"], sampler);
  }
  const YAML::Mark n_mark = root["plan"] && root["plan"]["partition_n"]
                                ? root["plan"]["partition_n"].Mark()
                                : (root["plan"] ? root["plan"].Mark() : root.Mark());
  if (n < 0 || n > K) {
    config_error(n_mark, "plan.partition_n",
                 "must lie in [0, " + std::to_string(K) + "]");
  }
  if (!cfg.refiner && n != K) {
    config_error(n_mark, "plan.partition_n",
                 "a partition below K needs a refiner");
  }
  cfg.plan = DecodePlan::collaborative(cfg.schedule, n, sampler, seed);
  cfg.plan.cfg_scale = cfg_scale;

  if (root["class"] && root["classes"]) {
    config_error(root["classes"].Mark(), "classes", "give either 'class' or 'classes'");
  }
  int batch = 1;
  if (root["batch"]) batch = get<int>(root["batch"], "batch");
  if (batch < 1 || batch > 4096) config_error(root["batch"].Mark(), "batch", "must lie in [1, 4096]");
  if (root["classes"]) {
    cfg.classes = get_list<int>(root["classes"], "classes");
    if (cfg.classes.empty()) config_error(root["classes"].Mark(), "classes", "must not be empty");
    if (root["batch"] && batch != static_cast<int>(cfg.classes.size())) {
      config_error(root["batch"].Mark(), "batch", "disagrees with the number of classes");
    }
  } else {
    const int c = root["class"] ? get<int>(root["class"], "class") : 0;
    cfg.classes.assign(batch, c);
  }
  for (int c : cfg.classes) {
    if (c < 0) config_error(root.Mark(), "classes", "class ids must be non-negative");
  }

  if (root["bytes_per_element"]) {
    cfg.bytes_per_element = get<int>(root["bytes_per_element"], "bytes_per_element");
    if (cfg.bytes_per_element != 2 && cfg.bytes_per_element != 4) {
      config_error(root["bytes_per_element"].Mark(), "bytes_per_element", "must be 2 or 4");
    }
  }
  if (root["jobs"]) {
    cfg.jobs = get<int>(root["jobs"], "jobs");
    if (cfg.jobs < 1 || cfg.jobs > 256) config_error(root["jobs"].Mark(), "jobs", "must lie in [1, 256]");
  }
  if (const YAML::Node out = root["output"]) {
    check_keys(out, "output", {"dir", "prefix", "png"});
    if (out["dir"]) cfg.output.dir = resolve(base, get<std::string>(out["dir"], "output.dir"));
    if (out["prefix"]) cfg.output.prefix = get<std::string>(out["prefix"], "output.prefix");
    if (out["png"]) cfg.output.png = get<bool>(out["png"], "output.png");
  }
  return cfg;
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    config_error(e.mark, "<document>", e.msg);
  }
  try {
    return parse_root(root, base_dir);
  } catch (const Error&) {
    throw;
  } catch (const YAML::Exception& e) {
    config_error(e.mark, "<document>", e.msg);
  } catch (const std::exception& e) {
    fail(ErrorKind::kConfig, std::string("line ?, field '<document>': ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kConfig, "cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path().empty() ? "." : path.parent_path());
}

void check_artifacts(const RunConfig& cfg) {
  std::error_code ec;
  for (const auto* p : {&cfg.vqvae, &cfg.drafter}) {
    if (!std::filesystem::is_regular_file(*p, ec)) {
      fail(ErrorKind::kMissingArtifact, "'" + p->string() + "' not found");
    }
  }
  if (cfg.refiner && !std::filesystem::is_regular_file(*cfg.refiner, ec)) {
    fail(ErrorKind::kMissingArtifact, "'" + cfg.refiner->string() + "' not found");
  }
}

void apply_seed_override(RunConfig& cfg, const char* value) {
  if (value == nullptr || *value == '\0') return;
  try {
    if (!std::isdigit(static_cast<unsigned char>(value[0]))) throw std::invalid_argument("sign");
    std::size_t used = 0;
    const unsigned long long seed = std::stoull(value, &used, 10);
    if (value[used] != '\0') throw std::invalid_argument("trailing characters");
    cfg.plan.seed = seed;
  } catch (const std::exception&) {
    fail(ErrorKind::kConfig, std::string("COSCALE_SEED is not an unsigned integer: '") + value + "'");
  }
}

}  // namespace coscale
