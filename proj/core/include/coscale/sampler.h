#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "coscale/plan.h"
#include "coscale/tensor.h"

namespace coscale {

// Truncated, renormalized sampling distribution of one logit row. Entries are
// ordered by descending probability (ties by ascending token index).
struct TruncatedSupport {
  std::vector<int> tokens;
  std::vector<double> probs;
};

// Temperature for scale k, then top-k, then the smallest top-p prefix of the
// top-k set. top_k > V is clamped to V with a one-time warning.
TruncatedSupport truncated_distribution(std::span<const float> logits, const SamplerConfig& cfg,
                                        int k);

// Lowest index among the maxima.
int argmax_row(std::span<const float> logits);

// Inverse-CDF draw from the truncated distribution with uniform u in [0, 1).
int sample_row(std::span<const float> logits, const SamplerConfig& cfg, int k, double u);

// One token per logit row. Row i of scale k on batch stream `stream` uses
// sample_uniform(seed, stream, k, i); greedy configs never touch the RNG.
std::vector<std::int32_t> sample_tokens(const Matrix& logits, const SamplerConfig& cfg, int k,
                                        std::uint64_t seed, std::uint32_t stream);

// uncond + scale * (cond - uncond), elementwise.
Matrix guided_logits(const Matrix& cond, const Matrix& uncond, double scale);

}  // namespace coscale
