#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "quantal/model.hpp"
#include "test_support.hpp"

using namespace quantal;
using quantal::testing::random_net;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::Timeout;
}

double product_at(const MarkovNet& net, const std::vector<std::uint8_t>& x) {
  double w = 1.0;
  for (const auto& p : net.potentials) w *= p.value(x);
  return w;
}

}  // namespace

TEST(ParseUai, MinimalFile) {
  MarkovNet net = parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4 0.6");
  ASSERT_EQ(net.num_vars, 1u);
  ASSERT_EQ(net.potentials.size(), 1u);
  EXPECT_EQ(net.potentials[0].scope, std::vector<VarId>{0});
  EXPECT_EQ(net.potentials[0].table, (std::vector<double>{0.4, 0.6}));
}

TEST(ParseUai, RejectsNonBinaryCardinality) {
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n3\n1\n1 0\n3\n0.1 0.2 0.7"); }), ErrorKind::UnsupportedArity);
}

TEST(ParseUai, SyntaxErrors) {
  EXPECT_EQ(kind_of([] { parse_uai("BAYES\n1\n2\n0\n"); }), ErrorKind::SyntaxError);
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n2\n1\n1 0\n3\n0.4 0.6 0.1"); }), ErrorKind::SyntaxError);
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n2\n1\n1 4\n2\n0.4 0.6"); }), ErrorKind::SyntaxError);
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4"); }), ErrorKind::SyntaxError);
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4 abc"); }), ErrorKind::SyntaxError);
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n2\n2 2\n1\n2 0 0\n4\n1 1 1 1"); }), ErrorKind::SyntaxError);
}

TEST(ParseUai, NegativeValue) {
  EXPECT_EQ(kind_of([] { parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n-0.4 0.6"); }), ErrorKind::NegativeValue);
}

TEST(ParseUai, CommentsAndEmptyScope) {
  MarkovNet net = parse_uai("# seed 3\nMARKOV\n2\n2 2\n2\n0\n2 1 0\n1\n5.0\n4\n1 2 3 4\n");
  ASSERT_EQ(net.potentials.size(), 2u);
  EXPECT_TRUE(net.potentials[0].scope.empty());
  EXPECT_EQ(net.potentials[0].table, std::vector<double>{5.0});
  // Last scope variable varies fastest: index = 2*x1 + x0.
  std::vector<std::uint8_t> x{1, 0};
  EXPECT_EQ(net.potentials[1].value(x), 2.0);
}

TEST(SerializeUai, RoundTripPairwise) {
  const char* text = "MARKOV\n2\n2 2\n1\n2 0 1\n\n4\n0.1 0.2 0.30000000000000004 4\n";
  MarkovNet net = parse_uai(text);
  EXPECT_EQ(parse_uai(serialize_uai(net)), net);
}

TEST(SerializeUai, RoundTripRandomNets) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 50; ++i) {
    MarkovNet net = random_net(rng, 2, 12);
    EXPECT_EQ(parse_uai(serialize_uai(net)), net);
  }
}

TEST(Evidence, ParseSidecar) {
  std::istringstream in("2\n0 1\n3 0\n");
  Evidence ev = parse_evidence(in, 4);
  EXPECT_EQ(ev.assignments.size(), 2u);
  EXPECT_EQ(ev.assignments.at(0), 1);
  EXPECT_EQ(ev.assignments.at(3), 0);
  std::istringstream bad("1\n9 1\n");
  EXPECT_EQ(kind_of([&] { parse_evidence(bad, 4); }), ErrorKind::UnknownVariable);
}

TEST(Evidence, EmptyIsIdentity) {
  std::mt19937_64 rng(3);
  MarkovNet net = random_net(rng, 4, 6);
  EXPECT_EQ(apply_evidence(net, {}), net);
}

TEST(Evidence, UnaryLookup) {
  MarkovNet net = parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4 0.6");
  Evidence ev;
  ev.assignments[0] = 1;
  MarkovNet out = apply_evidence(net, ev);
  ASSERT_EQ(out.potentials.size(), 1u);
  EXPECT_TRUE(out.potentials[0].scope.empty());
  EXPECT_EQ(out.potentials[0].table, std::vector<double>{0.6});
  EXPECT_FALSE(out.is_free(0));
}

TEST(Evidence, UnknownVariable) {
  MarkovNet net = parse_uai("MARKOV\n1\n2\n1\n1 0\n2\n0.4 0.6");
  Evidence ev;
  ev.assignments[5] = 0;
  EXPECT_EQ(kind_of([&] { apply_evidence(net, ev); }), ErrorKind::UnknownVariable);
}

TEST(Evidence, PreservesConsistentSlice) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    MarkovNet net = random_net(rng, 4, 4);
    Evidence ev;
    ev.assignments[2] = static_cast<std::uint8_t>(trial % 2);
    MarkovNet cond = apply_evidence(net, ev);
    double sum_orig = 0, sum_cond = 0;
    for (std::uint64_t bits = 0; bits < 16; ++bits) {
      auto x = quantal::testing::assignment(bits, 4);
      if (x[2] != ev.assignments[2]) continue;
      double a = product_at(net, x), b = product_at(cond, x);
      EXPECT_DOUBLE_EQ(a, b);
      sum_orig += a;
      sum_cond += b;
    }
    EXPECT_DOUBLE_EQ(sum_orig, sum_cond);
    for (const auto& p : cond.potentials)
      for (VarId v : p.scope) EXPECT_NE(v, 2u);
  }
}

TEST(PrimalGraph, ScopeCliqueAndEdgeless) {
  MarkovNet tri = parse_uai("MARKOV\n3\n2 2 2\n1\n3 0 1 2\n8\n1 1 1 1 1 1 1 1");
  Graph g = primal_graph(tri);
  EXPECT_EQ(g.num_edges(), 3u);
  EXPECT_TRUE(g.adjacent(0, 2));
  MarkovNet two = parse_uai("MARKOV\n2\n2 2\n2\n1 0\n1 1\n2\n1 2\n2\n3 4");
  EXPECT_EQ(primal_graph(two).num_edges(), 0u);
}

TEST(GenIsing, SingleCell) {
  MarkovNet net = gen_ising(1, 100, 1);
  EXPECT_EQ(net.num_vars, 1u);
  EXPECT_EQ(net.potentials.size(), 1u);
}

TEST(GenIsing, ThreeByThreeShape) {
  MarkovNet net = gen_ising(3, 100, 7);
  EXPECT_EQ(net.num_vars, 9u);
  std::size_t unary = 0, pairwise = 0;
  for (const auto& p : net.potentials) {
    if (p.scope.size() == 1) {
      ++unary;
      double g = p.table[0];
      EXPECT_GE(g, kIsingGammaFloor);
      EXPECT_LE(g, 1.0);
      EXPECT_DOUBLE_EQ(p.table[1], 1.0 / g);
    } else {
      ++pairwise;
      const auto& t = p.table;
      double theta = std::max(t[0], t[1]);
      EXPECT_GE(theta, 1.0);
      EXPECT_LE(theta, 100.0);
      EXPECT_EQ(t[0], t[3]);
      EXPECT_EQ(t[1], t[2]);
      EXPECT_DOUBLE_EQ(t[0] * t[1], 1.0);
    }
  }
  EXPECT_EQ(unary, 9u);
  EXPECT_EQ(pairwise, 12u);
  EXPECT_EQ(primal_graph(net).num_edges(), 12u);
}

TEST(GenIsing, Deterministic) {
  EXPECT_EQ(gen_ising(4, 100, 42), gen_ising(4, 100, 42));
  EXPECT_NE(gen_ising(4, 100, 42), gen_ising(4, 100, 43));
}

TEST(GenIsing, BadParameters) {
  EXPECT_EQ(kind_of([] { gen_ising(0, 100, 1); }), ErrorKind::BadParameter);
  EXPECT_EQ(kind_of([] { gen_ising(3, 1.0, 1); }), ErrorKind::BadParameter);
}

TEST(GenIsing, MirrorsBothOccur) {
  MarkovNet net = gen_ising(10, 100, 9);
  int mirrored = 0, plain = 0;
  for (const auto& p : net.potentials)
    if (p.scope.size() == 2) (p.table[0] >= 1.0 ? plain : mirrored)++;
  EXPECT_GT(mirrored, 40);
  EXPECT_GT(plain, 40);
}
