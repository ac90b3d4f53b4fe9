#include "coscale/checkpoint.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "coscale/errors.h"

namespace coscale {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  fail(ErrorKind::kCorruptCheckpoint, "unknown dtype '" + dtype + "'");
}

struct PendingTensor {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  const void* data;
  std::size_t nbytes;
};

void write_checkpoint(const std::filesystem::path& path, const std::string& kind,
                      const nlohmann::json& config, std::int64_t param_count,
                      const std::vector<PendingTensor>& tensors) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["kind"] = kind;
  header["config"] = config;
  header["param_count"] = param_count;
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    dir.push_back({{"name", t.name},
                   {"dtype", t.dtype},
                   {"shape", t.shape},
                   {"offset", offset},
                   {"nbytes", t.nbytes}});
    offset += t.nbytes;
  }
  header["payload_bytes"] = offset;
  header["tensors"] = dir;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t header_len = text.size();
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    out.write(static_cast<const char*>(t.data), static_cast<std::streamsize>(t.nbytes));
  }
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

struct LoadedCheckpoint {
  CheckpointHeader header;
  std::vector<char> payload;
};

std::uint64_t header_start() { return 4 + 4 + 8; }

CheckpointHeader parse_header(std::ifstream& in, const std::filesystem::path& path,
                              std::uint64_t file_size, std::uint64_t& payload_start) {
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  require(static_cast<bool>(in) && std::memcmp(magic, kMagic, 4) == 0,
          ErrorKind::kCorruptCheckpoint, "'" + path.string() + "' is not a checkpoint");
  require(version == kCheckpointVersion, ErrorKind::kCorruptCheckpoint,
          "unsupported checkpoint version " + std::to_string(version));
  require(header_len <= kMaxHeaderBytes && header_start() + header_len <= file_size,
          ErrorKind::kCorruptCheckpoint, "header length exceeds file size");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  require(static_cast<bool>(in), ErrorKind::kCorruptCheckpoint, "truncated header");
  payload_start = header_start() + header_len;

  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(text);
    require(j.at("format_version").get<std::uint32_t>() == kCheckpointVersion,
            ErrorKind::kCorruptCheckpoint, "header version mismatch");
    h.kind = j.at("kind").get<std::string>();
    h.config = j.at("config");
    h.param_count = j.value("param_count", std::int64_t{0});
    h.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
    for (const auto& t : j.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = t.at("dtype").get<std::string>();
      e.shape = t.at("shape").get<std::vector<std::int64_t>>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
      h.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptCheckpoint, std::string("malformed header: ") + e.what());
  }

  // Directory checks happen before any tensor is read.
  require(payload_start + h.payload_bytes == file_size, ErrorKind::kCorruptCheckpoint,
          "payload length does not match the directory");
  std::vector<const TensorEntry*> order;
  for (const auto& e : h.tensors) {
    std::uint64_t numel = 1;
    for (auto d : e.shape) {
      require(d >= 0 && d < (1ll << 40), ErrorKind::kCorruptCheckpoint, "bad shape for " + e.name);
      numel *= static_cast<std::uint64_t>(d);
    }
    require(numel * dtype_size(e.dtype) == e.nbytes, ErrorKind::kCorruptCheckpoint,
            "tensor '" + e.name + "' byte count disagrees with its shape");
    require(e.offset <= h.payload_bytes && e.nbytes <= h.payload_bytes - e.offset,
            ErrorKind::kCorruptCheckpoint, "tensor '" + e.name + "' lies outside the payload");
    order.push_back(&e);
  }
  std::sort(order.begin(), order.end(),
            [](const TensorEntry* a, const TensorEntry* b) { return a->offset < b->offset; });
  std::uint64_t cursor = 0;
  for (const TensorEntry* e : order) {
    require(e->offset >= cursor, ErrorKind::kCorruptCheckpoint,
            "tensor '" + e->name + "' overlaps its predecessor");
    require(e->offset == cursor, ErrorKind::kCorruptCheckpoint,
            "gap in payload before tensor '" + e->name + "'");
    cursor = e->offset + e->nbytes;
  }
  require(cursor == h.payload_bytes, ErrorKind::kCorruptCheckpoint,
          "directory does not cover the payload");
  return h;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& kind) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    fail(ErrorKind::kMissingArtifact, "checkpoint '" + path.string() + "' not found");
  }
  const std::uint64_t file_size = std::filesystem::file_size(path, ec);
  if (ec) fail(ErrorKind::kIo, "cannot stat '" + path.string() + "'");
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::uint64_t payload_start = 0;
  LoadedCheckpoint ck{parse_header(in, path, file_size, payload_start), {}};
  require(ck.header.kind == kind, ErrorKind::kCorruptCheckpoint,
          "expected a '" + kind + "' checkpoint, found '" + ck.header.kind + "'");
  ck.payload.resize(ck.header.payload_bytes);
  in.read(ck.payload.data(), static_cast<std::streamsize>(ck.payload.size()));
  require(static_cast<bool>(in), ErrorKind::kCorruptCheckpoint, "truncated payload");
  return ck;
}

const TensorEntry& find_entry(const CheckpointHeader& h, const std::string& name,
                              const std::string& dtype, const std::vector<std::int64_t>& shape) {
  for (const auto& e : h.tensors) {
    if (e.name != name) continue;
    require(e.dtype == dtype && e.shape == shape, ErrorKind::kCorruptCheckpoint,
            "tensor '" + name + "' has unexpected dtype or shape");
    return e;
  }
  fail(ErrorKind::kCorruptCheckpoint, "tensor '" + name + "' missing");
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    fail(ErrorKind::kMissingArtifact, "checkpoint '" + path.string() + "' not found");
  }
  const std::uint64_t file_size = std::filesystem::file_size(path, ec);
  std::ifstream in(path, std::ios::binary);
  if (!in || ec) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::uint64_t payload_start = 0;
  return parse_header(in, path, file_size, payload_start);
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"depth", cfg.depth},           {"width", cfg.width},
          {"heads", cfg.heads},           {"vocab", cfg.vocab},
          {"cond_classes", cfg.cond_classes}, {"channels", cfg.channels},
          {"patch_nums", cfg.patch_nums}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.depth = j.at("depth").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.cond_classes = j.at("cond_classes").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.patch_nums = j.at("patch_nums").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptCheckpoint, std::string("bad model config: ") + e.what());
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kCorruptCheckpoint, e.what());
  }
  return cfg;
}

void save_model(const ModelBundle& m, const std::filesystem::path& path) {
  m.validate();
  std::vector<PendingTensor> tensors;
  m.for_each_tensor([&](const std::string& name, const Tensor& t) {
    tensors.push_back({name, "f32", t.shape, t.ptr(), t.numel() * sizeof(float)});
  });
  write_checkpoint(path, "model", config_to_json(m.config), m.config.param_count(), tensors);
}

ModelBundle load_model(const std::filesystem::path& path) {
  const LoadedCheckpoint ck = load_checkpoint(path, "model");
  ModelBundle m = ModelBundle::zeros(config_from_json(ck.header.config));
  m.for_each_tensor([&](const std::string& name, Tensor& t) {
    const TensorEntry& e = find_entry(ck.header, name, "f32", t.shape);
    std::memcpy(t.ptr(), ck.payload.data() + e.offset, e.nbytes);
  });
  std::size_t expected = 0;
  m.for_each_tensor([&](const std::string&, const Tensor&) { ++expected; });
  require(ck.header.tensors.size() == expected, ErrorKind::kCorruptCheckpoint,
          "checkpoint holds unexpected extra tensors");
  m.validate();
  return m;
}

void save_vq(const VqModel& vq, const std::filesystem::path& path) {
  const auto& cb = vq.codebook;
  require(vq.decoder.channels == cb.channels(), ErrorKind::kShape,
          "decoder and codebook disagree on channels");
  const nlohmann::json config = {{"vocab", cb.vocab()}, {"channels", cb.channels()}};
  std::vector<PendingTensor> tensors = {
      {"codebook", "f64", {cb.vocab(), cb.channels()}, cb.data().data(),
       cb.data().size() * sizeof(double)},
      {"decoder.weight", "f64", {3, cb.channels()}, vq.decoder.weight.data(),
       vq.decoder.weight.size() * sizeof(double)},
      {"decoder.bias", "f64", {3}, vq.decoder.bias.data(), 3 * sizeof(double)},
  };
  const std::int64_t params = static_cast<std::int64_t>(cb.data().size() + vq.decoder.weight.size() + 3);
  write_checkpoint(path, "vqvae", config, params, tensors);
}

VqModel load_vq(const std::filesystem::path& path) {
  const LoadedCheckpoint ck = load_checkpoint(path, "vqvae");
  int vocab = 0, channels = 0;
  try {
    vocab = ck.header.config.at("vocab").get<int>();
    channels = ck.header.config.at("channels").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruptCheckpoint, std::string("bad vqvae config: ") + e.what());
  }
  require(vocab >= 1 && channels >= 1, ErrorKind::kCorruptCheckpoint, "bad vqvae dims");
  const auto read_f64 = [&](const std::string& name, std::vector<std::int64_t> shape) {
    const TensorEntry& e = find_entry(ck.header, name, "f64", shape);
    std::vector<double> v(e.nbytes / sizeof(double));
    std::memcpy(v.data(), ck.payload.data() + e.offset, e.nbytes);
    return v;
  };
  VqModel vq;
  vq.codebook = Codebook(vocab, channels, read_f64("codebook", {vocab, channels}));
  vq.decoder.channels = channels;
  vq.decoder.weight = read_f64("decoder.weight", {3, channels});
  const auto bias = read_f64("decoder.bias", {3});
  std::copy(bias.begin(), bias.end(), vq.decoder.bias.begin());
  return vq;
}

ModelBundle init_random_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& path) {
  ModelBundle m = ModelBundle::random(config, seed, InitOptions{});
  save_model(m, path);
  return m;
}

}  // namespace coscale
