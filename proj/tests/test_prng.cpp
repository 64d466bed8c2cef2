#include <gtest/gtest.h>

#include <cmath>

#include "mlmm/prng.hpp"
#include "mlmm/stats.hpp"

using namespace mlmm;

// Known-answer vectors for Philox4x32-10 (Random123 reference test vectors).
TEST(Prng, PhiloxKnownAnswers) {
  {
    auto out = philox4x32({0u, 0u, 0u, 0u}, {0u, 0u});
    EXPECT_EQ(out[0], 0x6627e8d5u);
    EXPECT_EQ(out[1], 0xe169c58du);
    EXPECT_EQ(out[2], 0xbc57ac4cu);
    EXPECT_EQ(out[3], 0x9b00dbd8u);
  }
  {
    auto out = philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                          {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(out[0], 0x408f276du);
    EXPECT_EQ(out[1], 0x41c83b0eu);
    EXPECT_EQ(out[2], 0xa20bc7c6u);
    EXPECT_EQ(out[3], 0x6d5451fdu);
  }
  {
    auto out = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                          {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(out[0], 0xd16cfe09u);
    EXPECT_EQ(out[1], 0x94fdccebu);
    EXPECT_EQ(out[2], 0x5001e420u);
    EXPECT_EQ(out[3], 0x24126ea1u);
  }
}

TEST(Prng, StreamsAreReproducible) {
  RngStream a(123456789ull, 7, 42);
  RngStream b(123456789ull, 7, 42);
  for (int i = 0; i < 1000; ++i) {
    ASSERT_EQ(a.next_u64(), b.next_u64());
  }
}

TEST(Prng, DistinctSubstreamsDiffer) {
  RngStream a(5ull, 0, 0);
  RngStream b(5ull, 0, 1);
  RngStream c(5ull, 1, 0);
  int equal_ab = 0, equal_ac = 0;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    if (va == b.next_u64()) ++equal_ab;
    if (va == c.next_u64()) ++equal_ac;
  }
  EXPECT_EQ(equal_ab, 0);
  EXPECT_EQ(equal_ac, 0);
}

TEST(Prng, UniformRangeAndMoments) {
  RngStream rng(2024ull, 0, 0);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sumsq += u * u;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 0.005);
  EXPECT_NEAR(var, 1.0 / 12.0, 0.005);
}

TEST(Prng, NormalMoments) {
  RngStream rng(99ull, 3, 4);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sumsq += z * z;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Stats, QuantileType7MatchesHandValues) {
  // type-7: h = (n-1)p, linear interpolation
  std::vector<double> v = {1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile_type7(v, 0.25), 1.75);
}

TEST(Stats, StudentTMatchesKnownValues) {
  // t_{0.975, inf} -> 1.96; standard table values
  EXPECT_NEAR(t_critical(1e9, 0.975), 1.959964, 1e-4);
  EXPECT_NEAR(t_critical(10, 0.975), 2.228139, 1e-5);
  EXPECT_NEAR(two_sided_p_t(2.228139, 10), 0.05, 1e-6);
  EXPECT_NEAR(two_sided_p_normal(1.959964), 0.05, 1e-6);
}
