#include <gtest/gtest.h>

#include "coscale/errors.h"
#include "coscale/schedule.h"

namespace coscale {
namespace {

TEST(ScheduleTest, DefaultTotals) {
  const auto s = ScaleSchedule::default_schedule();
  EXPECT_EQ(s.num_scales(), 10);
  EXPECT_EQ(s.total_tokens(), 680);
  EXPECT_EQ(s.final_side(), 16);
  EXPECT_EQ(s.tokens_at(9), 256);
}

TEST(ScheduleTest, PrefixTokens) {
  const auto s = ScaleSchedule::default_schedule();
  EXPECT_EQ(prefix_tokens(s, 0), 0);
  EXPECT_EQ(prefix_tokens(s, 6), 91);
  EXPECT_EQ(prefix_tokens(s, 10), 680);
  EXPECT_EQ(prefix_tokens(s, 9), 424);
}

TEST(ScheduleTest, PrefixOutOfRange) {
  const auto s = ScaleSchedule::default_schedule();
  try {
    prefix_tokens(s, 11);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kRange);
  }
  EXPECT_THROW(prefix_tokens(s, -1), Error);
}

TEST(ScheduleTest, RejectsInvalidSchedules) {
  for (const auto& bad : std::vector<std::vector<int>>{{}, {2, 1}, {1, 1}, {0, 1}, {-1, 2}}) {
    try {
      ScaleSchedule::build(bad);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kInvalidSchedule);
    }
  }
}

TEST(ScheduleTest, OffsetsAreCumulative) {
  const auto s = ScaleSchedule::build({1, 2, 4, 7});
  EXPECT_EQ(s.offsets(), (std::vector<int>{0, 1, 5, 21, 70}));
  for (int n = 0; n <= s.num_scales(); ++n) EXPECT_EQ(prefix_tokens(s, n), s.offset(n));
}

TEST(PyramidTest, SplitThenConcatIsIdentity) {
  const auto s = ScaleSchedule::build({1, 2, 3});
  TokenPyramid r{5, {TokenMap(1, 1), TokenMap(2, 2), TokenMap(3, 4)}};
  validate_pyramid(r, s);
  for (int n = 0; n <= 3; ++n) {
    auto [lo, hi] = split_pyramid(r, n);
    EXPECT_EQ(lo.num_scales(), n);
    validate_pyramid(hi, s, n);
    EXPECT_EQ(concat_pyramids(lo, hi), r);
  }
  EXPECT_EQ(r.token_count(), 14u);
}

TEST(PyramidTest, ValidationCatchesBadTokensAndShapes) {
  const auto s = ScaleSchedule::build({1, 2});
  TokenPyramid out_of_vocab{3, {TokenMap(1, 0), TokenMap(2, 3)}};
  EXPECT_THROW(validate_pyramid(out_of_vocab, s), Error);
  TokenPyramid wrong_side{3, {TokenMap(1, 0), TokenMap(3, 0)}};
  EXPECT_THROW(validate_pyramid(wrong_side, s), Error);
}

}  // namespace
}  // namespace coscale
