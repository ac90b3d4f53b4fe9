#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "coscale/schedule.h"
#include "coscale/tensor.h"

namespace coscale {

// V x C codebook of embedding vectors.
class Codebook {
 public:
  Codebook() = default;
  Codebook(int vocab, int channels);
  Codebook(int vocab, int channels, std::vector<double> data);

  // Unit-Gaussian rows with row 0 zeroed. Reproducible for a given seed.
  static Codebook random(int vocab, int channels, std::uint64_t seed);

  int vocab() const noexcept { return vocab_; }
  int channels() const noexcept { return channels_; }
  std::span<const double> row(int v) const {
    return {data_.data() + static_cast<std::size_t>(v) * channels_,
            static_cast<std::size_t>(channels_)};
  }
  std::span<double> row(int v) {
    return {data_.data() + static_cast<std::size_t>(v) * channels_,
            static_cast<std::size_t>(channels_)};
  }
  const std::vector<double>& data() const noexcept { return data_; }

  // Index of the closest row in L2; ties go to the lowest index.
  int nearest(std::span<const double> x) const;

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  int vocab_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// Per-pixel affine map from C feature channels to RGB signal in [-1, 1],
// followed by the usual (x + 1) / 2 mapping and a clamp to [0, 1].
struct DecoderWeights {
  int channels = 0;
  std::vector<double> weight;  // 3 x C, row-major
  std::array<double, 3> bias{};

  static DecoderWeights identity(int channels);
  static DecoderWeights zero(int channels);
  static DecoderWeights random(int channels, std::uint64_t seed);

  friend bool operator==(const DecoderWeights&, const DecoderWeights&) = default;
};

// The shared tokenizer side of the pipeline: codebook plus decoder.
struct VqModel {
  Codebook codebook;
  DecoderWeights decoder;

  friend bool operator==(const VqModel&, const VqModel&) = default;
};

// Bilinear interpolation with align-corners sampling. Same-size calls copy.
// Throws kRange when `to` is smaller than the input side.
FeatureMap upsample(const FeatureMap& map, int to);

// Normalized adjoint of `upsample`: each coarse cell is the bilinear-weighted
// average of the fine cells that interpolate from it. Pairing the two this
// way keeps the quantizer's residual norm non-increasing. Throws kRange when
// `to` exceeds the input side.
FeatureMap downsample(const FeatureMap& map, int to);

// Codebook lookup for every cell of a token map.
FeatureMap embed(const TokenMap& tokens, const Codebook& cb);

// acc += upsample(embed(tokens), acc.side()).
void accumulate_scale(FeatureMap& acc, const TokenMap& tokens, const Codebook& cb);

struct QuantizeResult {
  TokenPyramid pyramid;
  std::vector<double> residual_norms;  // L2 norm of the residual after each scale
};

// Multi-scale residual quantization of `f` (side must equal the final scale).
QuantizeResult quantize_pyramid(const FeatureMap& f, const Codebook& cb,
                                const ScaleSchedule& schedule);

// Sum of upsampled per-scale embeddings of low ++ high. The concatenation must
// be a contiguous run of scales starting at scale 0 (kContract otherwise).
FeatureMap reconstruct(const TokenPyramid& low, const TokenPyramid& high, const Codebook& cb,
                       const ScaleSchedule& schedule);

Image decode_image(const FeatureMap& fhat, const DecoderWeights& dec);

}  // namespace coscale
