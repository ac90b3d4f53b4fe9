#include <gtest/gtest.h>

#include <cmath>

#include "coscale/errors.h"
#include "coscale/finetune.h"
#include "coscale/rng.h"

namespace coscale::finetune {
namespace {

MatrixD row(std::initializer_list<double> v) {
  MatrixD m(1, v.size());
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

MatrixD random_logits(PhiloxStream& rng, int rows, int vocab, double scale = 2.0) {
  MatrixD m(rows, vocab);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

TokenPyramid targets_for(const ScaleLogits& logits, PhiloxStream& rng) {
  TokenPyramid t;
  t.vocab_size = static_cast<int>(logits[0].cols());
  for (const auto& l : logits) {
    TokenMap m;
    m.side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(l.rows()))));
    for (std::size_t i = 0; i < l.rows(); ++i) m.tokens.push_back(rng.below(t.vocab_size));
    t.maps.push_back(m);
  }
  return t;
}

ScaleLogits random_scales(PhiloxStream& rng, int vocab) {
  ScaleLogits out;
  for (int side : {1, 2, 3}) out.push_back(random_logits(rng, side * side, vocab));
  return out;
}

double rel(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

TEST(LambdaTest, EndpointsAndMidpoint) {
  EXPECT_EQ(lambda_schedule(0, 10), 1.0);
  EXPECT_EQ(lambda_schedule(10, 10), 0.0);
  EXPECT_EQ(lambda_schedule(5, 10), 0.5);
  EXPECT_EQ(lambda_schedule(0, 1), 1.0);
  EXPECT_THROW(lambda_schedule(11, 10), Error);
  EXPECT_THROW(lambda_schedule(-1, 10), Error);
  EXPECT_THROW(lambda_schedule(0, 0), Error);
}

TEST(DrafterLossTest, UniformLogitsGiveLogV) {
  for (int v : {2, 7, 4096}) {
    ScaleLogits logits = {MatrixD(1, v, 0.3), MatrixD(4, v, -1.0)};
    TokenPyramid t{v, {TokenMap(1, 1), TokenMap(2, 0)}};
    const auto r = drafter_loss(logits, t, 2);
    EXPECT_NEAR(r.per_scale[0], std::log(v), 1e-10);
    EXPECT_NEAR(r.per_scale[1], std::log(v), 1e-10);
    EXPECT_NEAR(r.total, 2 * std::log(v), 1e-10);
  }
}

TEST(DrafterLossTest, ConfidentCorrectLogitsGiveZero) {
  MatrixD l(4, 5, 0.0);
  TokenPyramid t{5, {TokenMap(2)}};
  t.maps[0].tokens = {0, 3, 4, 1};
  for (int i = 0; i < 4; ++i) l(i, t.maps[0].tokens[i]) = 1e6;
  EXPECT_NEAR(drafter_loss({l}, t, 1).total, 0.0, 1e-12);
}

TEST(DrafterLossTest, ZeroScalesAndMasking) {
  PhiloxStream rng(1, 0);
  auto logits = random_scales(rng, 6);
  const auto t = targets_for(logits, rng);
  EXPECT_EQ(drafter_loss(logits, t, 0).total, 0.0);
  const auto a = drafter_loss(logits, t, 2);
  const auto ga = drafter_loss_grad(logits, t, 2);
  logits[2] = random_logits(rng, 9, 6);
  EXPECT_EQ(drafter_loss(logits, t, 2).total, a.total);
  const auto gb = drafter_loss_grad(logits, t, 2);
  EXPECT_EQ(ga, gb);
  for (double g : gb[2].data()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(a.weights, (std::vector<double>{1, 1, 0}));
}

TEST(DrafterLossTest, MissingScaleIsContractError) {
  ScaleLogits logits = {MatrixD(1, 3)};
  TokenPyramid t{3, {TokenMap(1), TokenMap(2)}};
  try {
    drafter_loss(logits, t, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kContract);
  }
}

TEST(DrafterGradTest, UniformFourWayRow) {
  TokenPyramid t{4, {TokenMap(1, 2)}};
  const auto g = drafter_loss_grad({MatrixD(1, 4, 0.0)}, t, 1);
  EXPECT_DOUBLE_EQ(g[0](0, 0), 0.25);
  EXPECT_DOUBLE_EQ(g[0](0, 1), 0.25);
  EXPECT_DOUBLE_EQ(g[0](0, 2), -0.75);
  EXPECT_DOUBLE_EQ(g[0](0, 3), 0.25);
}

TEST(RefinerLossTest, IdenticalDistributionsGiveZero) {
  PhiloxStream rng(2, 0);
  const auto s = random_scales(rng, 5);
  for (int ep = 0; ep <= 4; ++ep) {
    const auto r = refiner_loss(s, s, ep, 4, 2);
    EXPECT_NEAR(r.total, 0.0, 1e-14);
    for (const auto& g : refiner_loss_grad(s, s, ep, 4, 2)) {
      for (double v : g.data()) EXPECT_NEAR(v, 0.0, 1e-15);
    }
  }
}

TEST(RefinerLossTest, HandComputedThreeClassKl) {
  // Scale 0: p = (.5, .3, .2), q = (.2, .3, .5). Scale 1: p = (.6, .2, .2), q uniform.
  // KL_0 = 0.3 ln 2.5, KL_1 = 0.6 ln 1.8 + 0.4 ln 0.6; n = 1, lambda = 0.75.
  const ScaleLogits student = {row({std::log(0.5), std::log(0.3), std::log(0.2)}),
                               row({std::log(0.6), std::log(0.2), std::log(0.2)})};
  const ScaleLogits teacher = {row({std::log(0.2), std::log(0.3), std::log(0.5)}),
                               row({0.0, 0.0, 0.0})};
  const auto r = refiner_loss(student, teacher, 1, 4, 1);
  EXPECT_NEAR(r.per_scale[0], 0.2748872195622465195550581635, 1e-12);
  EXPECT_NEAR(r.per_scale[1], 0.1483417494348751316316330458, 1e-12);
  EXPECT_NEAR(r.total, 0.3545071641065600212979266685, 1e-12);
  EXPECT_EQ(r.lambda_used, 0.75);
  EXPECT_EQ(r.weights, (std::vector<double>{0.75, 1.0}));
}

TEST(RefinerLossTest, FinalEpochDropsDraftScales) {
  PhiloxStream rng(3, 0);
  auto student = random_scales(rng, 4);
  const auto teacher = random_scales(rng, 4);
  const auto r = refiner_loss(student, teacher, 5, 5, 2);
  EXPECT_NEAR(r.total, r.per_scale[2], 1e-14);
  student[0] = random_logits(rng, 1, 4);
  EXPECT_EQ(refiner_loss(student, teacher, 5, 5, 2).total, r.total);
  const auto g = refiner_loss_grad(student, teacher, 5, 5, 2);
  for (double v : g[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(RefinerLossTest, NonNegativeAndTotalIsWeightedSum) {
  PhiloxStream rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_scales(rng, 7);
    const auto t = random_scales(rng, 7);
    const int ep = static_cast<int>(rng.below(6));
    const auto r = refiner_loss(s, t, ep, 5, 1 + trial % 3);
    EXPECT_GE(r.total, 0.0);
    double sum = 0;
    for (std::size_t k = 0; k < r.per_scale.size(); ++k) {
      EXPECT_GE(r.per_scale[k], 0.0);
      sum += r.weights[k] * r.per_scale[k];
    }
    EXPECT_LE(rel(sum, r.total), 1e-10);
  }
}

TEST(RefinerLossTest, NonIncreasingInEpochOnDraftOnlyTerms) {
  PhiloxStream rng(5, 0);
  auto s = random_scales(rng, 5);
  auto t = random_scales(rng, 5);
  t[2] = s[2];  // refining scale contributes zero
  double prev = INFINITY;
  for (int ep = 0; ep <= 8; ++ep) {
    const double v = refiner_loss(s, t, ep, 8, 2).total;
    EXPECT_LE(v, prev);
    prev = v;
  }
  EXPECT_NEAR(prev, 0.0, 1e-15);
}

TEST(RefinerLossTest, ShapeMismatchIsContractError) {
  ScaleLogits a = {MatrixD(1, 3)};
  ScaleLogits b = {MatrixD(1, 4)};
  EXPECT_THROW(refiner_loss(a, b, 0, 1, 0), Error);
  ScaleLogits c = {MatrixD(1, 3), MatrixD(4, 3)};
  EXPECT_THROW(refiner_loss(a, c, 0, 1, 0), Error);
}

// Central differences, h = 1e-5, on 100 random instances of each loss.
TEST(GradientTest, MatchesFiniteDifferences) {
  PhiloxStream rng(6, 0);
  const double h = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    const int vocab = 3 + trial % 6;
    const int n = trial % 4;
    auto logits = random_scales(rng, vocab);
    const auto targets = targets_for(logits, rng);
    const auto teacher = random_scales(rng, vocab);
    const int ep = trial % 5;

    const auto g_ce = drafter_loss_grad(logits, targets, n);
    const auto g_kl = refiner_loss_grad(logits, teacher, ep, 4, n);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      for (std::size_t i = 0; i < logits[k].data().size(); ++i) {
        double& z = logits[k].data()[i];
        const double z0 = z;
        z = z0 + h;
        const double ce_plus = drafter_loss(logits, targets, n).total;
        const double kl_plus = refiner_loss(logits, teacher, ep, 4, n).total;
        z = z0 - h;
        const double ce_minus = drafter_loss(logits, targets, n).total;
        const double kl_minus = refiner_loss(logits, teacher, ep, 4, n).total;
        z = z0;
        const double fd_ce = (ce_plus - ce_minus) / (2 * h);
        const double fd_kl = (kl_plus - kl_minus) / (2 * h);
        EXPECT_LE(rel(g_ce[k].data()[i], fd_ce), 1e-4) << trial << " " << k << " " << i;
        EXPECT_LE(rel(g_kl[k].data()[i], fd_kl), 1e-4) << trial << " " << k << " " << i;
      }
    }
  }
}

TEST(LogSoftmaxTest, StableForLargeLogits) {
  const std::vector<double> z = {1000.0, 1000.0, -1000.0};
  const auto l = log_softmax(z);
  EXPECT_NEAR(l[0], -std::log(2.0), 1e-12);
  EXPECT_NEAR(l[1], -std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(l[2]));
}

}  // namespace
}  // namespace coscale::finetune
