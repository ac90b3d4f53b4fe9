#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "coscale/tensor.h"

namespace coscale {

// Ordered per-scale side lengths of square token maps, with cumulative token
// offsets. offsets()[k] is the number of tokens in scales [0, k).
class ScaleSchedule {
 public:
  // Throws kInvalidSchedule unless `patch_nums` is non-empty, positive and
  // strictly increasing.
  static ScaleSchedule build(std::vector<int> patch_nums);

  // (1,2,3,4,5,6,8,10,13,16): 680 tokens over 10 scales.
  static ScaleSchedule default_schedule();

  int num_scales() const noexcept { return static_cast<int>(patch_nums_.size()); }
  int side(int k) const { return patch_nums_.at(k); }
  int tokens_at(int k) const { return side(k) * side(k); }
  int final_side() const { return patch_nums_.back(); }
  int offset(int k) const { return offsets_.at(k); }
  int total_tokens() const noexcept { return offsets_.back(); }

  const std::vector<int>& patch_nums() const noexcept { return patch_nums_; }
  const std::vector<int>& offsets() const noexcept { return offsets_; }

  friend bool operator==(const ScaleSchedule&, const ScaleSchedule&) = default;

 private:
  ScaleSchedule() = default;

  std::vector<int> patch_nums_;
  std::vector<int> offsets_;  // K + 1 entries
};

// Token count of the first n scales. Throws kRange unless 0 <= n <= K.
int prefix_tokens(const ScaleSchedule& schedule, int n);

// A contiguous run of token maps. A full pyramid holds all K scales starting at
// scale 0; drafted and refined parts are the two halves of a split.
struct TokenPyramid {
  int vocab_size = 0;
  std::vector<TokenMap> maps;

  int num_scales() const noexcept { return static_cast<int>(maps.size()); }
  std::size_t token_count() const;

  friend bool operator==(const TokenPyramid&, const TokenPyramid&) = default;
};

// Checks that `maps` match schedule sides starting at `first_scale` and that
// every token lies in [0, V). Throws kShape / kRange.
void validate_pyramid(const TokenPyramid& r, const ScaleSchedule& schedule,
                      int first_scale = 0);

// (maps[0, n), maps[n, K)). Throws kRange unless 0 <= n <= r.num_scales().
std::pair<TokenPyramid, TokenPyramid> split_pyramid(const TokenPyramid& r, int n);

TokenPyramid concat_pyramids(const TokenPyramid& low, const TokenPyramid& high);

}  // namespace coscale
