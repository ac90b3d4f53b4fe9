#include "coscale/sampler.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>

#include "coscale/errors.h"
#include "coscale/rng.h"

namespace coscale {
namespace {

std::atomic<bool> warned_top_k{false};

}  // namespace

int argmax_row(std::span<const float> logits) {
  require(!logits.empty(), ErrorKind::kShape, "empty logit row");
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

TruncatedSupport truncated_distribution(std::span<const float> logits, const SamplerConfig& cfg,
                                        int k) {
  const int vocab = static_cast<int>(logits.size());
  require(vocab > 0, ErrorKind::kShape, "empty logit row");
  for (float l : logits) require(std::isfinite(l), ErrorKind::kContract, "non-finite logit");

  int top_k = cfg.top_k;
  if (top_k > vocab) {
    if (!warned_top_k.exchange(true)) {
      std::cerr << "warning: top_k " << top_k << " exceeds vocab " << vocab
                << "; clamping to " << vocab << "\n";
    }
    top_k = vocab;
  }
  top_k = std::max(top_k, 1);

  std::vector<int> order(vocab);
  std::iota(order.begin(), order.end(), 0);
  const auto by_logit = [&](int a, int b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  };
  // by_logit is a strict total order, so the result is unique.
  if (top_k < vocab) std::nth_element(order.begin(), order.begin() + top_k, order.end(), by_logit);
  order.resize(top_k);
  std::sort(order.begin(), order.end(), by_logit);

  const double t = cfg.temperature(k);
  const double max_logit = logits[order.front()];
  std::vector<double> probs(top_k);
  double z = 0.0;
  for (int i = 0; i < top_k; ++i) {
    probs[i] = std::exp((static_cast<double>(logits[order[i]]) - max_logit) / t);
    z += probs[i];
  }
  for (double& p : probs) p /= z;

  constexpr double kSlack = 1e-12;
  double cum = 0.0;
  int keep = top_k;
  for (int i = 0; i < top_k; ++i) {
    cum += probs[i];
    if (cum >= cfg.top_p - kSlack) {
      keep = i + 1;
      break;
    }
  }
  order.resize(keep);
  probs.resize(keep);
  const double kept = std::accumulate(probs.begin(), probs.end(), 0.0);
  for (double& p : probs) p /= kept;
  return {std::move(order), std::move(probs)};
}

int sample_row(std::span<const float> logits, const SamplerConfig& cfg, int k, double u) {
  if (cfg.greedy) return argmax_row(logits);
  const TruncatedSupport support = truncated_distribution(logits, cfg, k);
  double cum = 0.0;
  for (std::size_t i = 0; i < support.tokens.size(); ++i) {
    cum += support.probs[i];
    if (u < cum) return support.tokens[i];
  }
  return support.tokens.back();
}

std::vector<std::int32_t> sample_tokens(const Matrix& logits, const SamplerConfig& cfg, int k,
                                        std::uint64_t seed, std::uint32_t stream) {
  std::vector<std::int32_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double u = cfg.greedy ? 0.0 : sample_uniform(seed, stream, k, static_cast<int>(i));
    out[i] = sample_row(logits.row(i), cfg, k, u);
  }
  return out;
}

Matrix guided_logits(const Matrix& cond, const Matrix& uncond, double scale) {
  require(cond.rows() == uncond.rows() && cond.cols() == uncond.cols(), ErrorKind::kShape,
          "guidance logits shape mismatch");
  Matrix out(cond.rows(), cond.cols());
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    const double u = uncond.data()[i];
    out.data()[i] = static_cast<float>(u + scale * (cond.data()[i] - u));
  }
  return out;
}

}  // namespace coscale
