#include "coscale/schedule.h"

#include <string>

#include "coscale/errors.h"

namespace coscale {

ScaleSchedule ScaleSchedule::build(std::vector<int> patch_nums) {
  require(!patch_nums.empty(), ErrorKind::kInvalidSchedule, "empty patch_nums");
  for (std::size_t i = 0; i < patch_nums.size(); ++i) {
    require(patch_nums[i] >= 1, ErrorKind::kInvalidSchedule,
            "patch_nums[" + std::to_string(i) + "] must be >= 1");
    require(i == 0 || patch_nums[i] > patch_nums[i - 1], ErrorKind::kInvalidSchedule,
            "patch_nums must be strictly increasing at index " + std::to_string(i));
  }
  ScaleSchedule s;
  s.offsets_.reserve(patch_nums.size() + 1);
  s.offsets_.push_back(0);
  for (int pn : patch_nums) s.offsets_.push_back(s.offsets_.back() + pn * pn);
  s.patch_nums_ = std::move(patch_nums);
  return s;
}

ScaleSchedule ScaleSchedule::default_schedule() {
  return build({1, 2, 3, 4, 5, 6, 8, 10, 13, 16});
}

int prefix_tokens(const ScaleSchedule& schedule, int n) {
  require(n >= 0 && n <= schedule.num_scales(), ErrorKind::kRange,
          "drafting steps " + std::to_string(n) + " outside [0, " +
              std::to_string(schedule.num_scales()) + "]");
  return schedule.offset(n);
}

std::size_t TokenPyramid::token_count() const {
  std::size_t n = 0;
  for (const auto& m : maps) n += m.tokens.size();
  return n;
}

void validate_pyramid(const TokenPyramid& r, const ScaleSchedule& schedule, int first_scale) {
  require(first_scale >= 0 && first_scale + r.num_scales() <= schedule.num_scales(),
          ErrorKind::kShape, "pyramid has more scales than the schedule");
  require(r.vocab_size >= 1, ErrorKind::kRange, "vocab size must be positive");
  for (int i = 0; i < r.num_scales(); ++i) {
    const auto& m = r.maps[i];
    const int k = first_scale + i;
    require(m.side == schedule.side(k) &&
                m.tokens.size() == static_cast<std::size_t>(m.side) * m.side,
            ErrorKind::kShape, "token map " + std::to_string(k) + " has wrong shape");
    for (auto t : m.tokens) {
      require(t >= 0 && t < r.vocab_size, ErrorKind::kRange,
              "token index " + std::to_string(t) + " outside vocab at scale " +
                  std::to_string(k));
    }
  }
}

std::pair<TokenPyramid, TokenPyramid> split_pyramid(const TokenPyramid& r, int n) {
  require(n >= 0 && n <= r.num_scales(), ErrorKind::kRange,
          "split point " + std::to_string(n) + " out of range");
  TokenPyramid low{r.vocab_size, {r.maps.begin(), r.maps.begin() + n}};
  TokenPyramid high{r.vocab_size, {r.maps.begin() + n, r.maps.end()}};
  return {std::move(low), std::move(high)};
}

TokenPyramid concat_pyramids(const TokenPyramid& low, const TokenPyramid& high) {
  TokenPyramid out{low.vocab_size != 0 ? low.vocab_size : high.vocab_size, low.maps};
  out.maps.insert(out.maps.end(), high.maps.begin(), high.maps.end());
  return out;
}

}  // namespace coscale
