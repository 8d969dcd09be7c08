#include <gtest/gtest.h>

#include "support/derived_checks.hpp"

namespace {

class DerivedOracle : public ::testing::TestWithParam<std::string> {};

TEST_P(DerivedOracle, MatchesOracle) {
  const auto r = oracle::run_check(GetParam());
  RecordProperty("detail", r.detail);
  EXPECT_TRUE(r.passed) << r.detail;
}

std::vector<std::string> names() {
  std::vector<std::string> out;
  for (const auto& c : oracle::derived_checks()) out.push_back(c.name);
  return out;
}

INSTANTIATE_TEST_SUITE_P(All, DerivedOracle, ::testing::ValuesIn(names()),
                         [](const auto& info) {
                           std::string s = info.param;
                           for (auto& ch : s) if (ch == '.') ch = '_';
                           return s;
                         });

}  // namespace
