#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "quantal/elimination.hpp"
#include "quantal/metrics.hpp"
#include "test_support.hpp"

using namespace quantal;

TEST(BruteForce, SingleUnary) {
  auto r = brute_force(parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4 0.6"));
  EXPECT_NEAR(r.log_z, 0.0, 1e-15);
  EXPECT_NEAR(r.marginals[0][0], 0.4, 1e-15);
  EXPECT_NEAR(r.marginals[0][1], 0.6, 1e-15);
}

TEST(BruteForce, FairCoins) {
  auto r = brute_force(parse_uai("MARKOV\n2\n2 2\n2\n1 0\n1 1\n2\n0.5 0.5\n2\n0.5 0.5"));
  EXPECT_NEAR(r.log_z, 0.0, 1e-15);
  for (const auto& m : r.marginals) EXPECT_NEAR(m[0], 0.5, 1e-15);
}

TEST(BruteForce, AgreesWithAbq) {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    MarkovNet net = quantal::testing::random_net(rng, 10, 10, 0.0);
    EXPECT_NEAR(brute_force(net).log_z, abq(net, {}).log_z, 1e-9);
  }
}

TEST(BruteForce, PotentialOrderInvariance) {
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 10; ++trial) {
    MarkovNet net = quantal::testing::random_net(rng, 6, 12, 0.0);
    MarkovNet shuffled = net;
    std::shuffle(shuffled.potentials.begin(), shuffled.potentials.end(), rng);
    EXPECT_NEAR(brute_force(net).log_z, brute_force(shuffled).log_z, 1e-12);
  }
}

TEST(BruteForce, TooLarge) {
  MarkovNet net;
  net.num_vars = 26;
  net.cardinalities.assign(26, 2);
  try {
    brute_force(net);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooLarge);
  }
}

TEST(LogRelativeDiff, Basics) {
  EXPECT_EQ(log_relative_diff(3.5, 3.5), 0.0);
  EXPECT_DOUBLE_EQ(log_relative_diff(4.0, 2.0), 1.0);
  try {
    log_relative_diff(1.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateReference);
  }
}

TEST(LogRelativeDiff, UpperBoundIsNonNegative) {
  std::mt19937_64 rng(53);
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    MarkovNet net = quantal::testing::random_net(rng, 12, 12, 0.0);
    double exact = brute_force(net).log_z;
    if (exact <= 1e-12) continue;
    QuantizeConfig cfg;
    cfg.mode = BoundMode::Upper;
    double up = abq(net, 8, cfg, minfill_order(primal_graph(net))).log_z;
    EXPECT_GE(log_relative_diff(up, exact), -1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(AvgKl, Basics) {
  Marginals p{{0.3, 0.7}, {0.5, 0.5}};
  EXPECT_EQ(avg_kl(p, p), 0.0);
  EXPECT_NEAR(avg_kl({{1.0, 0.0}}, {{0.5, 0.5}}), std::log(2.0), 1e-15);
  EXPECT_TRUE(std::isinf(avg_kl({{0.5, 0.5}}, {{1.0, 0.0}})));
}

TEST(AvgKl, NonNegative) {
  std::mt19937_64 rng(54);
  for (int trial = 0; trial < 200; ++trial) {
    double a = quantal::testing::uniform(rng, 0, 1), b = quantal::testing::uniform(rng, 1e-9, 1 - 1e-9);
    EXPECT_GE(avg_kl({{a, 1 - a}}, {{b, 1 - b}}), -1e-12);
  }
}

TEST(Report, DeltaPresentIffReference) {
  EvalReport r = make_report(std::log(100.0), std::nullopt);
  EXPECT_NEAR(r.log10_z_estimate, 2.0, 1e-12);
  EXPECT_FALSE(r.delta);
  r = make_report(4.0, 2.0);
  ASSERT_TRUE(r.delta);
  EXPECT_DOUBLE_EQ(*r.delta, 1.0);
}
