#include "coscale/rng.h"

#include <cmath>
#include <numbers>

namespace coscale {
namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53;
constexpr std::uint32_t kMul1 = 0xCD9E8D57;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

}  // namespace

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

double uniform_from_words(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits =
      ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;  // 53 bits
  return static_cast<double>(bits) * 0x1.0p-53;
}

double sample_uniform(std::uint64_t seed, std::uint32_t stream, int scale, int row) {
  const auto out = philox4x32_10(
      {static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(scale), stream, kSampleTag},
      key_from_seed(seed));
  return uniform_from_words(out[0], out[1]);
}

double normal_at(std::uint64_t seed, std::uint64_t index, std::uint32_t word2,
                 std::uint32_t tag) {
  const auto out = philox4x32_10({static_cast<std::uint32_t>(index),
                                  static_cast<std::uint32_t>(index >> 32), word2, tag},
                                 key_from_seed(seed));
  const double u1 = 1.0 - uniform_from_words(out[0], out[1]);  // (0, 1]
  const double u2 = uniform_from_words(out[2], out[3]);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double PhiloxStream::uniform() {
  const std::uint64_t i = index_++;
  const auto out = philox4x32_10(
      {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32), channel_, kAuxTag},
      key_from_seed(seed_));
  return uniform_from_words(out[0], out[1]);
}

double PhiloxStream::normal() { return normal_at(seed_, index_++, channel_, kAuxTag ^ 1u); }

std::uint32_t PhiloxStream::below(std::uint32_t n) {
  return static_cast<std::uint32_t>(uniform() * n) % n;
}

}  // namespace coscale
