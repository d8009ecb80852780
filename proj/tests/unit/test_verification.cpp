#include <atm/verification.hpp>

#include <gtest/gtest.h>

#include <sstream>

namespace {

using namespace atm;

TEST(OracleSuite, AllRowsWithinTolerance) {
  const OracleReport r = oracle_suite(2024);
  EXPECT_TRUE(r.passed());
  for (const OracleRow& row : r.rows) {
    EXPECT_TRUE(row.passed) << row.name << " deviation " << row.max_deviation << " > " << row.tolerance;
    EXPECT_GT(row.instances, 0) << row.name;
  }
  EXPECT_GE(r.row("perception").instances, 100);
  EXPECT_GE(r.row("forward").instances, 100);
  EXPECT_GE(r.row("discrepancy").instances, 100);
}

TEST(OracleSuite, ReportsListEveryRow) {
  const OracleReport r = oracle_suite(7, 5);
  std::ostringstream text;
  std::ostringstream csv;
  write_report_text(text, r);
  write_report_csv(csv, r);
  for (const OracleRow& row : r.rows) {
    EXPECT_NE(text.str().find(row.name), std::string::npos);
    EXPECT_NE(csv.str().find(row.name + ","), std::string::npos);
  }
}

TEST(Oracles, PlainLoopHelpers) {
  EXPECT_EQ(oracle::coin_answer("A coin is heads up. Al flips the coin. Bo flips the coin. Is it?"), "yes");
  EXPECT_EQ(oracle::coin_answer("A coin is heads up. Al flips the coin. Bo does not flip the coin. Is it?"), "no");
  EXPECT_EQ(oracle::last_letters("Take the last letters of the words in \"Amy Brown\" and concatenate them."), "yn");
  EXPECT_NEAR(oracle::gelu(0.0), 0.0, 1e-15);
  EXPECT_NEAR(oracle::gelu(10.0), 10.0, 1e-9);
}

TEST(Oracles, DenseAttentionIsCausal) {
  const oracle::Grid q{{1, 0}, {0, 1}};
  const oracle::Grid k{{1, 0}, {0, 1}};
  const oracle::Grid v{{1, 2}, {3, 4}};
  const oracle::Grid out = oracle::attention(q, k, v, 1, true, 1.0);
  EXPECT_DOUBLE_EQ(out[0][0], 1.0);
  EXPECT_DOUBLE_EQ(out[0][1], 2.0);
  const double w = std::exp(1.0) / (1.0 + std::exp(1.0));
  EXPECT_NEAR(out[1][0], (1 - w) * 1 + w * 3, 1e-15);
}

}  // namespace
