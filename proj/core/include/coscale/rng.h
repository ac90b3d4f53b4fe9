#pragma once

#include <array>
#include <cstdint>

namespace coscale {

// Philox4x32-10 counter-based generator (Salmon et al., Random123).
//
// Every random value in the engine is a pure function of (seed, counter), so
// draws never depend on evaluation order or thread count. Counter words are
// assigned as follows:
//
//   sampling:  {token index within scale, scale index, stream id, kSampleTag}
//   weights:   {element index lo, element index hi, tensor index, kInitTag}
//   test data: {index lo, index hi, caller tag, kAuxTag}
//
// Stream id is the batch element's global index (first_stream + b), which is
// what makes a batch run equal the concatenation of single runs.
using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter counter, PhiloxKey key);

inline PhiloxKey key_from_seed(std::uint64_t seed) {
  return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
}

inline constexpr std::uint32_t kSampleTag = 0x53414d50;  // "SAMP"
inline constexpr std::uint32_t kInitTag = 0x494e4954;    // "INIT"
inline constexpr std::uint32_t kAuxTag = 0x41555821;     // "AUX!"

// Uniform double in [0, 1) built from two 32-bit words (53 bits).
double uniform_from_words(std::uint32_t hi, std::uint32_t lo);

// Uniform draw for token `row` of `scale` on batch stream `stream`.
double sample_uniform(std::uint64_t seed, std::uint32_t stream, int scale, int row);

// Standard normal from one Philox block (Box-Muller on the two uniforms).
double normal_at(std::uint64_t seed, std::uint64_t index, std::uint32_t word2,
                 std::uint32_t tag);

// Sequential convenience generator over a single Philox stream. Used for test
// data and weight initialization; state is just the running index.
class PhiloxStream {
 public:
  PhiloxStream(std::uint64_t seed, std::uint32_t channel) : seed_(seed), channel_(channel) {}

  double uniform();
  double normal();
  // Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n);

 private:
  std::uint64_t seed_;
  std::uint32_t channel_;
  std::uint64_t index_ = 0;
};

}  // namespace coscale
