#include "coscale/artifact_io.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#ifdef COSCALE_HAVE_PNG
#include <png.h>
#endif

#include "coscale/errors.h"

namespace coscale {
namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

// Next whitespace-delimited header token of a netpbm file, skipping comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

int pnm_int(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = pnm_token(in);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::kConfig, "malformed image header in '" + path.string() + "'");
  }
}

struct RawPnm {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<int> samples;
  int maxval = 255;
};

RawPnm read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingArtifact, "image '" + path.string() + "' not found");
  const std::string magic = pnm_token(in);
  RawPnm img;
  bool binary = false;
  if (magic == "P2" || magic == "P5") img.channels = 1;
  else if (magic == "P3" || magic == "P6") img.channels = 3;
  else fail(ErrorKind::kConfig, "'" + path.string() + "' is not a PGM/PPM image");
  binary = magic == "P5" || magic == "P6";
  img.width = pnm_int(in, path);
  img.height = pnm_int(in, path);
  img.maxval = pnm_int(in, path);
  require(img.width > 0 && img.height > 0 && img.width <= 8192 && img.height <= 8192 &&
              img.maxval > 0 && img.maxval < 65536,
          ErrorKind::kConfig, "unsupported image geometry in '" + path.string() + "'");
  const std::size_t count = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(count);
  if (binary) {
    const int bytes = img.maxval > 255 ? 2 : 1;
    for (std::size_t i = 0; i < count; ++i) {
      int v = in.get();
      if (bytes == 2) v = (v << 8) | in.get();
      require(static_cast<bool>(in), ErrorKind::kConfig, "truncated image '" + path.string() + "'");
      img.samples[i] = v;
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) img.samples[i] = pnm_int(in, path);
  }
  return img;
}

finetune::ScaleLogits logits_from_json(const nlohmann::json& j) {
  finetune::ScaleLogits out;
  for (const auto& scale : j) {
    const auto rows = scale.get<std::vector<std::vector<double>>>();
    require(!rows.empty(), ErrorKind::kConfig, "empty logit block in fixture");
    MatrixD m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == m.cols(), ErrorKind::kConfig, "ragged logit block in fixture");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    out.push_back(std::move(m));
  }
  return out;
}

double relative_error(double actual, double expected, double floor) {
  return std::abs(actual - expected) / std::max({std::abs(actual), std::abs(expected), floor});
}

}  // namespace

nlohmann::json pyramid_to_json(const TokenPyramid& r) {
  nlohmann::json maps = nlohmann::json::array();
  std::vector<int> patch_nums;
  for (const auto& m : r.maps) {
    patch_nums.push_back(m.side);
    nlohmann::json grid = nlohmann::json::array();
    for (int y = 0; y < m.side; ++y) {
      grid.push_back(std::vector<std::int32_t>(m.tokens.begin() + y * m.side,
                                               m.tokens.begin() + (y + 1) * m.side));
    }
    maps.push_back(std::move(grid));
  }
  return {{"vocab", r.vocab_size}, {"patch_nums", patch_nums}, {"maps", maps}};
}

TokenPyramid pyramid_from_json(const nlohmann::json& j) {
  TokenPyramid r;
  try {
    r.vocab_size = j.at("vocab").get<int>();
    for (const auto& grid : j.at("maps")) {
      const auto rows = grid.get<std::vector<std::vector<std::int32_t>>>();
      TokenMap m(static_cast<int>(rows.size()));
      for (std::size_t y = 0; y < rows.size(); ++y) {
        require(rows[y].size() == rows.size(), ErrorKind::kConfig, "token map is not square");
        std::copy(rows[y].begin(), rows[y].end(), m.tokens.begin() + y * rows.size());
      }
      r.maps.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed token pyramid: ") + e.what());
  }
  for (const auto& m : r.maps) {
    for (auto t : m.tokens) {
      require(t >= 0 && t < r.vocab_size, ErrorKind::kConfig, "token outside vocab in pyramid");
    }
  }
  return r;
}

nlohmann::json stats_to_json(const DecodeStats& s) {
  nlohmann::json handoffs = nlohmann::json::array();
  for (const auto& h : s.handoffs) {
    handoffs.push_back({{"scale", h.scale},
                        {"from_model", h.from_model},
                        {"to_model", h.to_model},
                        {"freed_bytes", h.freed_bytes},
                        {"ingested_positions", h.ingested_positions},
                        {"ingest_seconds", h.ingest_seconds}});
  }
  return {{"rows", s.rows},
          {"bytes_per_element", s.bytes_per_element},
          {"scale_seconds", s.scale_seconds},
          {"scale_model", s.scale_model},
          {"cache_bytes", s.cache_bytes},
          {"cache_formula_bytes", s.cache_formula_bytes},
          {"peak_cache_bytes", s.peak_cache_bytes},
          {"start_seconds", s.start_seconds},
          {"handoffs", handoffs},
          {"freed_bytes", s.handoff_freed_bytes},
          {"image_seconds", s.image_seconds}};
}

nlohmann::json loss_report_to_json(const finetune::LossReport& r) {
  return {{"total", r.total},
          {"per_scale", r.per_scale},
          {"weights", r.weights},
          {"lambda_used", r.lambda_used}};
}

nlohmann::json memory_report_to_json(const analysis::MemoryReport& r) {
  return {{"running", r.running},
          {"kv_cache", r.kv_cache},
          {"params", r.params},
          {"total", r.total},
          {"phases",
           {{"draft_peak", r.phases.draft_peak},
            {"post_release", r.phases.post_release},
            {"refine_peak", r.phases.refine_peak}}}};
}

nlohmann::json latency_report_to_json(const analysis::LatencyReport& r) {
  return {{"repetitions", r.repetitions},
          {"scale_mean_seconds", r.scale_mean},
          {"scale_stddev_seconds", r.scale_stddev},
          {"ingest_mean_seconds", r.ingest_mean},
          {"ingest_stddev_seconds", r.ingest_stddev},
          {"decode_mean_seconds", r.decode_mean},
          {"last_three_fraction", r.last_three_fraction}};
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << "P6\n" << img.side << " " << img.side << "\n255\n";
  for (float v : img.rgb) out.put(static_cast<char>(to_byte(v)));
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

Image read_ppm(const std::filesystem::path& path) {
  const RawPnm raw = read_pnm(path);
  require(raw.width == raw.height, ErrorKind::kShape, "image is not square");
  Image img(raw.width);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) {
    const int v = raw.channels == 3 ? raw.samples[i] : raw.samples[i / 3];
    img.rgb[i] = static_cast<float>(v) / static_cast<float>(raw.maxval);
  }
  return img;
}

bool write_png(const Image& img, const std::filesystem::path& path) {
#ifdef COSCALE_HAVE_PNG
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (fp == nullptr) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail(ErrorKind::kIo, "libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.side, img.side, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.side) * 3);
  for (int y = 0; y < img.side; ++y) {
    for (int x = 0; x < img.side * 3; ++x) row[x] = to_byte(img.rgb[y * img.side * 3 + x]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  return true;
#else
  (void)img;
  (void)path;
  return false;
#endif
}

Mask read_mask(const std::filesystem::path& path) {
  const RawPnm raw = read_pnm(path);
  require(raw.width == raw.height, ErrorKind::kShape, "mask image must be square");
  Mask m(raw.width, false);
  for (int i = 0; i < raw.width * raw.height; ++i) {
    bool any = false;
    for (int c = 0; c < raw.channels; ++c) any = any || raw.samples[i * raw.channels + c] != 0;
    m.inside[i] = any ? 1 : 0;
  }
  return m;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kMissingArtifact, "'" + path.string() + "' not found");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

std::vector<FixtureOutcome> check_loss_fixtures(const nlohmann::json& fixtures) {
  std::vector<FixtureOutcome> outcomes;
  try {
    for (const auto& c : fixtures.at("cases")) {
      FixtureOutcome o;
      o.name = c.value("name", std::string("case") + std::to_string(outcomes.size()));
      const std::string kind = c.at("kind").get<std::string>();
      const int n = c.at("n").get<int>();
      const double loss_rtol = c.value("loss_rtol", 1e-10);
      const double grad_rtol = c.value("grad_rtol", 1e-4);

      finetune::LossReport report;
      finetune::ScaleLogits grad;
      if (kind == "drafter") {
        const auto logits = logits_from_json(c.at("logits"));
        TokenPyramid targets;
        for (const auto& t : c.at("targets")) {
          const auto tokens = t.get<std::vector<std::int32_t>>();
          TokenMap m;
          m.side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(tokens.size()))));
          m.tokens = tokens;
          targets.maps.push_back(std::move(m));
        }
        targets.vocab_size = logits.empty() ? 1 : static_cast<int>(logits[0].cols());
        report = finetune::drafter_loss(logits, targets, n);
        grad = finetune::drafter_loss_grad(logits, targets, n);
      } else if (kind == "refiner") {
        const auto student = logits_from_json(c.at("student"));
        const auto teacher = logits_from_json(c.at("teacher"));
        const int ep = c.at("ep").get<int>();
        const int total_ep = c.at("total_ep").get<int>();
        report = finetune::refiner_loss(student, teacher, ep, total_ep, n);
        grad = finetune::refiner_loss_grad(student, teacher, ep, total_ep, n);
      } else {
        fail(ErrorKind::kConfig, "unknown fixture kind '" + kind + "'");
      }

      const double expected_loss = c.at("expected_loss").get<double>();
      o.loss_error = relative_error(report.total, expected_loss, 1e-12);
      bool ok = o.loss_error <= loss_rtol;

      const auto expected_grad = logits_from_json(c.at("expected_grad"));
      ok = ok && expected_grad.size() == grad.size();
      for (std::size_t k = 0; ok && k < grad.size(); ++k) {
        ok = grad[k].rows() == expected_grad[k].rows() && grad[k].cols() == expected_grad[k].cols();
        for (std::size_t i = 0; ok && i < grad[k].data().size(); ++i) {
          o.max_grad_error = std::max(
              o.max_grad_error, relative_error(grad[k].data()[i], expected_grad[k].data()[i], 1e-6));
        }
      }
      o.passed = ok && o.max_grad_error <= grad_rtol;
      outcomes.push_back(o);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed loss fixture: ") + e.what());
  }
  return outcomes;
}

}  // namespace coscale
