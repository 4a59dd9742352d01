// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace distillseg;
using namespace distillseg::composer;

namespace {

/// One-hot probabilities for a 2-class map.
ProbMap<double> one_hot(const LabelMap& labels) {
  Tensor4<double> t(Shape4{labels.batch(), 2, labels.height(), labels.width()});
  for (std::size_t b = 0; b < labels.batch(); ++b) {
    for (std::size_t y = 0; y < labels.height(); ++y) {
      for (std::size_t x = 0; x < labels.width(); ++x) t(b, static_cast<std::size_t>(labels(b, y, x)), y, x) = 1.0;
    }
  }
  return ProbMap<double>(t);
}

ProbMap<double> single_pixel(double p_fg) {
  return ProbMap<double>(Tensor4<double>(Shape4{1, 2, 1, 1}, std::vector<double>{1.0 - p_fg, p_fg}));
}

}  // namespace

TEST(DiceLoss, PerfectPrediction) {
  const LabelMap gt(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 1, 1, 0, 0, 0, 0});
  const double v = dice_loss(one_hot(gt), gt, 1.0).value;
  EXPECT_LE(v, 1.0 / (2.0 * 4.0 + 1.0) + 1e-12);
  EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(DiceLoss, DisjointPrediction) {
  const LabelMap gt(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 1, 1, 0, 0, 0, 0});
  const LabelMap pred(1, 2, 4, 2, std::vector<std::int32_t>{0, 0, 0, 0, 1, 1, 1, 1});
  EXPECT_NEAR(dice_loss(one_hot(pred), gt, 1.0).value, 1.0 - 1.0 / 9.0, 1e-4);
}

TEST(DiceLoss, HalfOverlapSmoothToZero) {
  const LabelMap gt(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 1, 1, 0, 0, 0, 0});
  const LabelMap pred(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 0, 0, 1, 1, 0, 0});
  EXPECT_NEAR(dice_loss(one_hot(pred), gt, 1e-12).value, 0.5, 1e-4);
}

TEST(DiceLoss, RangeAndGradient) {
  Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const auto probs = oracle::random_probs(rng, Shape4{2, 3, 4, 4});
    const auto gt = oracle::random_labels(rng, 2, 4, 4, 3);
    const double v = dice_loss(ProbMap<double>(probs), gt, 1.0).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_LT(oracle::fd_seg(52, 5, true), 1e-3);
}

TEST(FocalLoss, PerfectPredictionVanishes) {
  EXPECT_NEAR(focal_loss(single_pixel(1.0), LabelMap(1, 1, 1, 2, 1), 2.0).value, 0.0, 1e-12);
}

TEST(FocalLoss, GammaZeroIsCrossEntropy) {
  EXPECT_NEAR(focal_loss(single_pixel(0.5), LabelMap(1, 1, 1, 2, 1), 0.0).value, std::log(2.0), 1e-4);
  Rng rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const ProbMap<double> probs(oracle::random_probs(rng, Shape4{2, 3, 4, 4}));
    const auto gt = oracle::random_labels(rng, 2, 4, 4, 3);
    EXPECT_NEAR(focal_loss(probs, gt, 0.0).value, cross_entropy(probs, gt), 1e-9);
  }
}

TEST(FocalLoss, GammaTwoHalf) {
  EXPECT_NEAR(focal_loss(single_pixel(0.5), LabelMap(1, 1, 1, 2, 1), 2.0).value, 0.25 * std::log(2.0), 1e-4);
  EXPECT_NEAR(0.25 * std::log(2.0), 0.1733, 1e-4);
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  EXPECT_LT(oracle::fd_seg(54, 5, false), 1e-3);
}

TEST(SegLoss, ErrorsOnBadInput) {
  const LabelMap gt(1, 1, 2, 2, 0);
  EXPECT_THROW(dice_loss(single_pixel(0.5), gt, 1.0), ValidationError);
  EXPECT_THROW(focal_loss(single_pixel(0.5), LabelMap(1, 1, 1, 2, 0), -1.0), ValidationError);
}

TEST(TotalLoss, ZeroWeightsGiveSeg) {
  const auto b = total_loss(0.7, 0.3, 0.4, 0.5, {0.0, 0.0, 0.0}, {true, true, true});
  EXPECT_EQ(b.total, 0.7);
}

TEST(TotalLoss, DefaultWeightsArithmetic) {
  const auto b = total_loss(0.5, 0.1, 0.2, 0.3, {0.2, 0.9, 0.9}, {true, true, true});
  EXPECT_NEAR(b.total, 0.97, 1e-12);
}

TEST(TotalLoss, FlagsOffIgnoreWeights) {
  const auto b = total_loss(0.5, 9.0, 9.0, 9.0, {5.0, 5.0, 5.0}, {false, false, false});
  EXPECT_EQ(b.total, 0.5);
  EXPECT_EQ(b.logits, 0.0);
  EXPECT_EQ(b.kernel, 0.0);
  EXPECT_EQ(b.affinity, 0.0);
}

TEST(TotalLoss, LinearInEachComponent) {
  const LossWeights w{0.2, 0.9, 0.9};
  const ModuleFlags on{true, true, true};
  const auto base = total_loss(0.5, 0.1, 0.2, 0.3, w, on);
  EXPECT_NEAR(total_loss(0.5, 0.2, 0.2, 0.3, w, on).total - base.total, 0.2 * 0.1, 1e-12);
  EXPECT_NEAR(total_loss(0.5, 0.1, 0.4, 0.3, w, on).total - base.total, 0.9 * 0.2, 1e-12);
  EXPECT_NEAR(total_loss(0.5, 0.1, 0.2, 0.6, w, on).total - base.total, 0.9 * 0.3, 1e-12);
}

TEST(TotalLoss, NanAbortNamesComponent) {
  try {
    total_loss(0.5, 0.1, NAN, 0.3, {0.2, 0.9, 0.9}, {true, true, true});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("kernel"), std::string::npos);
  }
}

TEST(DiceScore, Examples) {
  const LabelMap gt(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 1, 1, 0, 0, 0, 0});
  const LabelMap disjoint(1, 2, 4, 2, std::vector<std::int32_t>{0, 0, 0, 0, 1, 1, 1, 1});
  const LabelMap half(1, 2, 4, 2, std::vector<std::int32_t>{1, 1, 0, 0, 1, 1, 0, 0});
  EXPECT_EQ(dice_score(gt, gt), 1.0);
  EXPECT_EQ(dice_score(disjoint, gt), 0.0);
  EXPECT_NEAR(dice_score(half, gt), 0.5, 1e-12);
  const LabelMap empty(1, 2, 2, 2, 0);
  EXPECT_EQ(dice_score(empty, empty), 1.0);
}

TEST(DiceScore, SymmetricAndBounded) {
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = oracle::random_labels(rng, 1, 5, 5, 2);
    const auto b = oracle::random_labels(rng, 1, 5, 5, 2);
    EXPECT_EQ(dice_score(a, b), dice_score(b, a));
    EXPECT_GE(dice_score(a, b), 0.0);
    EXPECT_LE(dice_score(a, b), 1.0);
  }
}
