// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace distillseg;
using namespace distillseg::logitskd;

TEST(LogitsLoss, IdenticalLogitsGiveZero) {
  Rng rng(41);
  const auto x = oracle::random_tensor(rng, Shape4{2, 3, 4, 4}, 3.0);
  EXPECT_NEAR(logits_loss(x, x).value, 0.0, 1e-9);
}

TEST(LogitsLoss, SinglePixelClosedForm) {
  const Tensor4<double> s(Shape4{1, 2, 1, 1}, std::vector<double>{0.0, 0.0});
  const Tensor4<double> t(Shape4{1, 2, 1, 1}, std::vector<double>{std::log(9.0), 0.0});
  EXPECT_NEAR(logits_loss(s, t).value, 0.5 * std::log(25.0 / 9.0), 1e-4);
  EXPECT_NEAR(logits_loss(s, t).value, 0.5108, 1e-4);
}

TEST(LogitsLoss, MeanOverPixels) {
  // pixel 0 identical, pixel 1 the closed-form case
  const Tensor4<double> s(Shape4{1, 2, 1, 2}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
  const Tensor4<double> t(Shape4{1, 2, 1, 2}, std::vector<double>{1.0, std::log(9.0), 1.0, 0.0});
  EXPECT_NEAR(logits_loss(s, t).value, 0.2554, 1e-4);
}

TEST(LogitsLoss, ShapeMismatchThrows) {
  const Tensor4<double> a(Shape4{1, 2, 2, 2});
  const Tensor4<double> b(Shape4{1, 2, 2, 1});
  EXPECT_THROW(logits_loss(a, b), ValidationError);
}

TEST(LogitsLoss, ShiftInvariantPerPixel) {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = oracle::random_tensor(rng, Shape4{2, 3, 3, 3});
    const auto t = oracle::random_tensor(rng, Shape4{2, 3, 3, 3});
    auto s2 = s;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t y = 0; y < 3; ++y) {
        for (std::size_t x = 0; x < 3; ++x) {
          const double c = rng.normal(0.0, 10.0);
          for (std::size_t ch = 0; ch < 3; ++ch) s2(b, ch, y, x) += c;
        }
      }
    }
    EXPECT_NEAR(logits_loss(s, t).value, logits_loss(s2, t).value, 1e-9);
    EXPECT_GE(logits_loss(s, t).value, -30e-8);
  }
}

TEST(LogitsLoss, ReverseDirectionDiffers) {
  const Tensor4<double> s(Shape4{1, 2, 1, 1}, std::vector<double>{0.0, 0.0});
  const Tensor4<double> t(Shape4{1, 2, 1, 1}, std::vector<double>{std::log(9.0), 0.0});
  LogitsOptions rev;
  rev.kl_reverse = true;
  const double expected = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  EXPECT_NEAR(logits_loss(s, t, rev).value, expected, 1e-6);
}

TEST(LogitsLoss, GradientMatchesFiniteDifferences) {
  EXPECT_LT(oracle::fd_logits(43, 5), 1e-3);
}

TEST(LogitsLoss, GradientOnlyForStudent) {
  Rng rng(44);
  const auto s = oracle::random_tensor(rng, Shape4{1, 2, 2, 2});
  const auto t = oracle::random_tensor(rng, Shape4{1, 2, 2, 2});
  const auto out = logits_loss(s, t);
  // The output type carries no teacher gradient; the student gradient has the student shape.
  EXPECT_EQ(out.grad_student.shape(), s.shape());
}
