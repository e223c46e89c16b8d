#include <gtest/gtest.h>

#include "xmodal/embed.hpp"
#include "xmodal/rng.hpp"

using namespace xmodal;

namespace {

Matrix col(std::initializer_list<double> v) {
  Matrix m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

} // namespace

TEST(DelayEmbed, SingleShift) {
  const DelayedDesign d = delay_embed(col({1, 2, 3, 4}), {1});
  EXPECT_EQ(d.values, col({0, 1, 2, 3}));
}

TEST(DelayEmbed, TwoDelaysByHand) {
  const DelayedDesign d = delay_embed(col({1, 2, 3}), {1, 2});
  Matrix want(3, 2);
  want << 0, 0, 1, 0, 2, 1;
  EXPECT_EQ(d.values, want);
}

TEST(DelayEmbed, MatchesBruteForce) {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(20, 3);
  const std::vector<int> delays{1, 2, 3, 4};
  const DelayedDesign d = delay_embed(x, delays);
  ASSERT_EQ(d.values.rows(), 20);
  ASSERT_EQ(d.values.cols(), 12);
  for (std::size_t k = 0; k < delays.size(); ++k)
    for (Index t = 0; t < 20; ++t)
      for (Index f = 0; f < 3; ++f) {
        const Index src = t - delays[k];
        EXPECT_EQ(d.values(t, static_cast<Index>(k) * 3 + f), src >= 0 ? x(src, f) : 0.0);
      }
}

TEST(DelayEmbed, BlockEqualsLagShift) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const FeatureMatrix f(rng.normal_matrix(15 + static_cast<Index>(rng.index(10)), 1 + static_cast<Index>(rng.index(4))), 2.0);
    const std::vector<int> delays{1, 3, 4, 7};
    const DelayedDesign d = delay_embed(f, delays);
    for (std::size_t k = 0; k < delays.size(); ++k) EXPECT_EQ(Matrix(d.block(k)), lag_shift(f, delays[k]).values);
  }
}

TEST(DelayEmbed, Errors) {
  const Matrix x = Matrix::Ones(5, 2);
  EXPECT_THROW(delay_embed(x, {}), ConfigError);
  EXPECT_THROW(delay_embed(x, {1, 1}), ConfigError);
  EXPECT_THROW(delay_embed(x, {0, 1}), ConfigError);
  EXPECT_THROW(delay_embed(x, {-1}), ConfigError);
}

TEST(LagShift, ByHand) {
  const FeatureMatrix f(col({10, 20, 30}), 20.0);
  EXPECT_EQ(lag_shift(f, 0).values, f.values);
  EXPECT_EQ(lag_shift(f, 1).values, col({0, 10, 20}));
  EXPECT_EQ(lag_shift(f, -1).values, col({20, 30, 0}));
  EXPECT_EQ(lag_shift(f, 1).rate_hz, 20.0);
}

TEST(LagShift, RoundTripRestoresInterior) {
  Rng rng(2);
  const FeatureMatrix f(rng.normal_matrix(30, 2), 1.0);
  for (int a : {-5, -1, 2, 7}) {
    const Matrix back = lag_shift(lag_shift(f, a), -a).values;
    const Index lo = a > 0 ? 0 : -a, hi = a > 0 ? 30 - a : 30;
    // Only the |a| rows shifted out and back are lost; the 2|a| band is an upper bound.
    EXPECT_EQ(back.middleRows(lo, hi - lo), f.values.middleRows(lo, hi - lo));
    EXPECT_EQ((back - f.values).cwiseAbs().rowwise().maxCoeff().cwiseSign().sum(), std::abs(a));
  }
}

TEST(LagShift, Errors) {
  const FeatureMatrix f(Matrix::Ones(3, 1), 1.0);
  EXPECT_THROW(lag_shift(f, 3), ConfigError);
  EXPECT_THROW(lag_shift(f, -3), ConfigError);
}

TEST(LagGrid, Defaults) {
  const auto lags = lag_grid();
  ASSERT_EQ(lags.size(), 81u);
  EXPECT_EQ(lags.front(), -40);
  EXPECT_EQ(lags.back(), 40);
  for (std::size_t i = 1; i < lags.size(); ++i) EXPECT_EQ(lags[i] - lags[i - 1], 1);
}

TEST(LagGrid, SingleZero) { EXPECT_EQ(lag_grid(0.0, 0.0, 1), std::vector<int>{0}); }

TEST(LagGrid, SymmetricOneSecond) {
  const auto lags = lag_grid(-1.0, 1.0, 41, 20.0);
  ASSERT_EQ(lags.size(), 41u);
  EXPECT_EQ(lags.front(), -20);
  EXPECT_EQ(lags.back(), 20);
  for (std::size_t i = 1; i < lags.size(); ++i) EXPECT_EQ(lags[i] - lags[i - 1], 1);
}

TEST(LagGrid, Errors) {
  EXPECT_THROW(lag_grid(-2.0, 2.0, 80, 20.0), ConfigError); // 80/79 samples per step
  EXPECT_THROW(lag_grid(-1.0, 1.0, 1, 20.0), ConfigError);
  EXPECT_THROW(lag_grid(1.0, -1.0, 5, 20.0), ConfigError);
  EXPECT_THROW(lag_grid(0.0, 1.0, 0, 20.0), ConfigError);
}
