#include "coscale/quantizer.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "coscale/errors.h"
#include "coscale/rng.h"

namespace coscale {
namespace {

// Bilinear tap for fine index i when interpolating a coarse axis of length s
// onto a fine axis of length n.
struct Tap {
  int lo;
  int hi;
  double t;  // weight of `hi`
};

std::vector<Tap> bilinear_taps(int s, int n) {
  std::vector<Tap> taps(n);
  for (int i = 0; i < n; ++i) {
    if (s == 1 || n == 1) {
      taps[i] = {0, 0, 0.0};
      continue;
    }
    const double src = static_cast<double>(i) * (s - 1) / (n - 1);
    const int lo = std::min(static_cast<int>(std::floor(src)), s - 1);
    taps[i] = {lo, std::min(lo + 1, s - 1), src - lo};
  }
  return taps;
}

}  // namespace

Codebook::Codebook(int vocab, int channels)
    : vocab_(vocab), channels_(channels),
      data_(static_cast<std::size_t>(vocab) * channels, 0.0) {
  require(vocab >= 1 && channels >= 1, ErrorKind::kShape, "codebook needs V >= 1 and C >= 1");
}

Codebook::Codebook(int vocab, int channels, std::vector<double> data)
    : vocab_(vocab), channels_(channels), data_(std::move(data)) {
  require(vocab >= 1 && channels >= 1, ErrorKind::kShape, "codebook needs V >= 1 and C >= 1");
  require(data_.size() == static_cast<std::size_t>(vocab) * channels, ErrorKind::kShape,
          "codebook data has wrong length");
  for (double v : data_) require(std::isfinite(v), ErrorKind::kContract, "non-finite codebook entry");
}

Codebook Codebook::random(int vocab, int channels, std::uint64_t seed) {
  Codebook cb(vocab, channels);
  PhiloxStream rng(seed, 0xC0DEB00Cu);
  for (auto& v : cb.data_) v = rng.normal();
  std::fill_n(cb.data_.begin(), channels, 0.0);
  return cb;
}

int Codebook::nearest(std::span<const double> x) const {
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int v = 0; v < vocab_; ++v) {
    const auto r = row(v);
    double d = 0.0;
    for (int c = 0; c < channels_; ++c) {
      const double diff = x[c] - r[c];
      d += diff * diff;
    }
    if (d < best_dist) {
      best_dist = d;
      best = v;
    }
  }
  return best;
}

DecoderWeights DecoderWeights::identity(int channels) {
  DecoderWeights dec = zero(channels);
  for (int c = 0; c < std::min(3, channels); ++c) dec.weight[c * channels + c] = 1.0;
  return dec;
}

DecoderWeights DecoderWeights::zero(int channels) {
  DecoderWeights dec;
  dec.channels = channels;
  dec.weight.assign(static_cast<std::size_t>(3) * channels, 0.0);
  return dec;
}

DecoderWeights DecoderWeights::random(int channels, std::uint64_t seed) {
  DecoderWeights dec = zero(channels);
  PhiloxStream rng(seed, 0xDEC0DE00u);
  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  for (auto& w : dec.weight) w = rng.normal() * scale;
  return dec;
}

FeatureMap upsample(const FeatureMap& map, int to) {
  require(to >= map.side(), ErrorKind::kRange,
          "upsample target " + std::to_string(to) + " below side " + std::to_string(map.side()));
  if (to == map.side()) return map;
  const int channels = map.channels();
  const auto taps = bilinear_taps(map.side(), to);
  FeatureMap out(to, channels);
  for (int y = 0; y < to; ++y) {
    const Tap ty = taps[y];
    for (int x = 0; x < to; ++x) {
      const Tap tx = taps[x];
      const double w00 = (1 - ty.t) * (1 - tx.t);
      const double w01 = (1 - ty.t) * tx.t;
      const double w10 = ty.t * (1 - tx.t);
      const double w11 = ty.t * tx.t;
      auto dst = out.cell(y, x);
      const auto a = map.cell(ty.lo, tx.lo);
      const auto b = map.cell(ty.lo, tx.hi);
      const auto c = map.cell(ty.hi, tx.lo);
      const auto d = map.cell(ty.hi, tx.hi);
      for (int ch = 0; ch < channels; ++ch) {
        dst[ch] = w00 * a[ch] + w01 * b[ch] + w10 * c[ch] + w11 * d[ch];
      }
    }
  }
  return out;
}

FeatureMap downsample(const FeatureMap& map, int to) {
  require(to >= 1 && to <= map.side(), ErrorKind::kRange,
          "downsample target " + std::to_string(to) + " outside [1, " +
              std::to_string(map.side()) + "]");
  if (to == map.side()) return map;
  const int n = map.side();
  const int channels = map.channels();
  const auto taps = bilinear_taps(to, n);

  std::vector<double> mass(to, 0.0);
  for (const Tap& t : taps) {
    mass[t.lo] += 1 - t.t;
    mass[t.hi] += t.t;
  }

  FeatureMap out(to, channels);
  for (int y = 0; y < n; ++y) {
    const Tap ty = taps[y];
    for (int x = 0; x < n; ++x) {
      const Tap tx = taps[x];
      const auto src = map.cell(y, x);
      const int rows[2] = {ty.lo, ty.hi};
      const double wy[2] = {1 - ty.t, ty.t};
      const int cols[2] = {tx.lo, tx.hi};
      const double wx[2] = {1 - tx.t, tx.t};
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          const double w = wy[i] * wx[j];
          if (w == 0.0) continue;
          auto dst = out.cell(rows[i], cols[j]);
          for (int ch = 0; ch < channels; ++ch) dst[ch] += w * src[ch];
        }
      }
    }
  }
  for (int a = 0; a < to; ++a) {
    for (int b = 0; b < to; ++b) {
      const double m = mass[a] * mass[b];
      for (double& v : out.cell(a, b)) v /= m;
    }
  }
  return out;
}

FeatureMap embed(const TokenMap& tokens, const Codebook& cb) {
  FeatureMap out(tokens.side, cb.channels());
  for (int y = 0; y < tokens.side; ++y) {
    for (int x = 0; x < tokens.side; ++x) {
      const int t = tokens.at(y, x);
      require(t >= 0 && t < cb.vocab(), ErrorKind::kRange, "token outside codebook");
      const auto r = cb.row(t);
      std::copy(r.begin(), r.end(), out.cell(y, x).begin());
    }
  }
  return out;
}

void accumulate_scale(FeatureMap& acc, const TokenMap& tokens, const Codebook& cb) {
  acc += upsample(embed(tokens, cb), acc.side());
}

QuantizeResult quantize_pyramid(const FeatureMap& f, const Codebook& cb,
                                const ScaleSchedule& schedule) {
  require(f.side() == schedule.final_side(), ErrorKind::kShape,
          "feature side " + std::to_string(f.side()) + " != final scale side " +
              std::to_string(schedule.final_side()));
  require(f.channels() == cb.channels(), ErrorKind::kShape,
          "feature channels do not match codebook");

  QuantizeResult result;
  result.pyramid.vocab_size = cb.vocab();
  FeatureMap residual = f;
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int side = schedule.side(k);
    const FeatureMap coarse = downsample(residual, side);
    TokenMap tokens(side);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) tokens.at(y, x) = cb.nearest(coarse.cell(y, x));
    }
    residual -= upsample(embed(tokens, cb), f.side());
    result.residual_norms.push_back(residual.l2_norm());
    result.pyramid.maps.push_back(std::move(tokens));
  }
  return result;
}

FeatureMap reconstruct(const TokenPyramid& low, const TokenPyramid& high, const Codebook& cb,
                       const ScaleSchedule& schedule) {
  FeatureMap acc(schedule.final_side(), cb.channels());
  int k = 0;
  for (const TokenPyramid* part : {&low, &high}) {
    for (const auto& m : part->maps) {
      require(k < schedule.num_scales() && m.side == schedule.side(k), ErrorKind::kContract,
              "token maps are not a contiguous prefix of the schedule at scale " +
                  std::to_string(k));
      accumulate_scale(acc, m, cb);
      ++k;
    }
  }
  return acc;
}

Image decode_image(const FeatureMap& fhat, const DecoderWeights& dec) {
  require(fhat.channels() == dec.channels, ErrorKind::kShape,
          "decoder channels do not match feature map");
  Image img(fhat.side());
  for (int y = 0; y < fhat.side(); ++y) {
    for (int x = 0; x < fhat.side(); ++x) {
      const auto f = fhat.cell(y, x);
      for (int c = 0; c < 3; ++c) {
        double s = dec.bias[c];
        for (int j = 0; j < dec.channels; ++j) s += dec.weight[c * dec.channels + j] * f[j];
        const double px = std::clamp((s + 1.0) * 0.5, 0.0, 1.0);
        img.at(y, x, c) = static_cast<float>(std::isnan(px) ? 0.5 : px);
      }
    }
  }
  return img;
}

}  // namespace coscale
