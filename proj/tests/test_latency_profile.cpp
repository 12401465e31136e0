#include <gtest/gtest.h>

#include "pipesim/latency_profile.hpp"

using namespace pipesim;

TEST(PromptTime, SinglePointProportional) {
  LatencyProfile prof({{8, 1000, 1600}}, {{8, 40}}, ScalingMode::Bilinear, false);
  EXPECT_DOUBLE_EQ(prof.prompt_time(8, 500), 800.0);
  EXPECT_DOUBLE_EQ(prof.intercept(), 0.0);
}

TEST(PromptTime, TableMidpoint) {
  LatencyProfile prof({{8, 500, 800}, {8, 1000, 1600}}, {{8, 40}}, ScalingMode::Table);
  EXPECT_DOUBLE_EQ(prof.prompt_time(8, 750), 1200.0);
  EXPECT_DOUBLE_EQ(prof.prompt_time(8, 100), 800.0);
  EXPECT_DOUBLE_EQ(prof.prompt_time(8, 4000), 1600.0);
}

TEST(PromptTime, MonotoneInPromptLength) {
  LatencyProfile table({{8, 100, 200}, {8, 400, 700}, {8, 1000, 1600}, {16, 1000, 3000}}, {{8, 40}},
                       ScalingMode::Table);
  LatencyProfile fit({{8, 100, 200}, {8, 400, 700}, {8, 1000, 1600}, {16, 1000, 3000}}, {{8, 40}});
  for (std::int64_t b : {1, 8, 12, 16, 32}) {
    for (std::int64_t p = 1; p < 1200; p += 37) {
      EXPECT_GE(table.prompt_time(b, p + 37), table.prompt_time(b, p));
      EXPECT_GE(fit.prompt_time(b, p + 37), fit.prompt_time(b, p));
    }
  }
}

TEST(PromptTime, BilinearResidualsMatchPlane) {
  LatencyProfile prof({{1, 100, 21}, {2, 100, 39}, {4, 200, 161}}, {{1, 5}});
  const auto res = prof.fit_residuals();
  ASSERT_EQ(res.size(), 3u);
  const auto& pts = prof.prompt_table();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(pts[i].ms - res[i], prof.prompt_time(pts[i].batch, pts[i].prompt_len), 1e-9);
  }
}

TEST(TokenTime, LookupInterpolateExtrapolate) {
  LatencyProfile one({{8, 1000, 1600}}, {{8, 40}});
  EXPECT_DOUBLE_EQ(one.token_time(8), 40.0);
  LatencyProfile two({{8, 1000, 1600}}, {{8, 40}, {16, 44}});
  EXPECT_DOUBLE_EQ(two.token_time(12), 42.0);
  EXPECT_DOUBLE_EQ(two.token_time(32), 44.0);
  EXPECT_DOUBLE_EQ(two.token_time(1), 40.0);
}

TEST(BimodalRatio, Division) {
  LatencyProfile prof({{8, 1000, 1600}}, {{8, 40}}, ScalingMode::Bilinear, false);
  EXPECT_DOUBLE_EQ(prof.bimodal_ratio(8, 1000), 40.0);
  EXPECT_DOUBLE_EQ(constant_profile(3, 3).bimodal_ratio(4, 10), 1.0);
}

TEST(BimodalRatio, AtLeastOneWhenPromptDominates) {
  LatencyProfile prof({{1, 10, 50}, {4, 10, 120}, {8, 100, 900}}, {{1, 20}, {8, 45}}, ScalingMode::Table);
  for (std::int64_t b : {1, 2, 4, 8, 16}) {
    for (std::int64_t p : {1, 10, 50, 100, 500}) EXPECT_GE(prof.bimodal_ratio(b, p), 1.0);
  }
}

TEST(LatencyProfile, CalibrationErrors) {
  EXPECT_THROW(LatencyProfile({}, {{8, 40}}), ConfigError);
  EXPECT_THROW(LatencyProfile({{8, 100, 10}}, {}), ConfigError);
  EXPECT_THROW(LatencyProfile({{8, 100, -1}}, {{8, 40}}), ConfigError);
  EXPECT_THROW(LatencyProfile({{8, 100, 10}, {8, 200, 5}}, {{8, 40}}), ConfigError);
  EXPECT_THROW(LatencyProfile().prompt_time(1, 1), ConfigError);
}
