#include <gtest/gtest.h>

#include <cmath>

#include "oracle.hpp"

using namespace oracle;

TEST(Oracle, AttentionHandCase) {
  // teacher (3,4) over two locations, student (1,0)
  Array4 s(1, 1, 1, 2), t(1, 1, 1, 2);
  s.data = {1.0, 0.0};
  t.data = {std::sqrt(3.0), 2.0};  // channel sum of squares gives the map (3, 4)
  EXPECT_NEAR(oracle_at_level(s, t, 2), std::sqrt(0.8), 1e-12);
}

TEST(Oracle, KdUniformTwoClassIsLn2) {
  Array4 t(1, 2, 1, 1);
  t.data = {0.3, 0.3};
  EXPECT_NEAR(oracle_kd(t, t, 4.0, false), std::log(2.0), 1e-12);
}

TEST(Oracle, WhitenPlusMinusOne) {
  Array4 f(1, 2, 1, 1);
  f.data = {1.0, -1.0};
  const double eps = 1e-5;
  auto w = oracle_whiten(f, eps);
  EXPECT_NEAR(w.data[0], 1.0 / std::sqrt(1.0 + eps), 1e-15);
  EXPECT_NEAR(w.data[1], -1.0 / std::sqrt(1.0 + eps), 1e-15);
}

TEST(Oracle, FiniteDifferenceOfSquare) {
  auto g = finite_difference_grad([](const std::vector<double>& x) { return x[0] * x[0]; }, {3.0}, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(Oracle, FiniteDifferenceOfZeroFunction) {
  auto g = finite_difference_grad([](const std::vector<double>&) { return 0.0; }, {1.0, -2.0, 0.5}, 1e-5);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Oracle, IouFromPixelSets) {
  const std::vector<int64_t> truth{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 255, 255};
  const std::vector<int64_t> pred{0, 1, 1, 1, 0, 0, 1, 0, 2, 2, 1, 2, 2, 0, 0, 1};
  auto iou = oracle_iou(pred, truth, 3);
  // class 0: truth {0,1,4,5}, pred {0,4,5,7,13}: I=3, U=6
  EXPECT_DOUBLE_EQ(iou[0], 3.0 / 6.0);
  // class 1: truth {2,3,6,7}, pred {1,2,3,6,10}: I=3, U=6
  EXPECT_DOUBLE_EQ(iou[1], 3.0 / 6.0);
  // class 2: truth {8..13}, pred {8,9,11,12}: I=4, U=6
  EXPECT_DOUBLE_EQ(iou[2], 4.0 / 6.0);
}
