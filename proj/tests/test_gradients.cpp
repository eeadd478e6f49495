#include <gtest/gtest.h>

#include "gradient_suite.hpp"

namespace {

class GradientCase : public ::testing::TestWithParam<gradient_suite::Case> {};

TEST_P(GradientCase, AnalyticMatchesCentralDifference) {
  const auto r = GetParam().run();
  EXPECT_GT(r.checked, 0u);
  EXPECT_GT(r.grad_norm, 0.0);
  EXPECT_LT(r.rel_error, 1e-4) << "max abs deviation " << r.max_abs;
}

INSTANTIATE_TEST_SUITE_P(Suite, GradientCase, ::testing::ValuesIn(gradient_suite::cases()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
