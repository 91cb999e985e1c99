// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "quantal/quantal.hpp"
#include "test_support.hpp"

using namespace quantal;
using quantal::testing::assignment;
using quantal::testing::random_net;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double time_limit_s, const std::function<Outcome()>& body) {
  auto start = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  double secs = std::chrono::duration<double>(Clock::now() - start).count();
  if (time_limit_s > 0 && secs > time_limit_s) {
    o.pass = false;
    o.detail += " (over the " + std::to_string(static_cast<int>(time_limit_s)) + " s limit)";
  }
  if (!o.pass) ++failures;
  std::printf("%s  %2d  %-28s %8.2fs  %s\n", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

JunctionTree tree_for(const MarkovNet& net) { return build_junction_tree(net, minfill_order(primal_graph(net))); }

std::vector<MarkovNet> oracle_nets() {
  std::mt19937_64 rng(20240601);
  std::vector<MarkovNet> nets;
  for (int i = 0; i < 200; ++i) nets.push_back(random_net(rng, 8, 18, 0.2));
  return nets;
}

}  // namespace

int main() {
  const std::vector<MarkovNet> nets = oracle_nets();
  std::vector<double> exact(nets.size());
  std::size_t size_violations = 0, size_checks = 0;
  std::size_t max_product_over_k2 = 0;

  criterion(1, "oracle exactness", 60, [&] {
    std::size_t bad = 0;
    double worst = 0;
    for (std::size_t i = 0; i < nets.size(); ++i) {
      exact[i] = brute_force(nets[i]).log_z;
      double got = abq(nets[i], {}).log_z;
      if (std::isinf(exact[i]) || std::isinf(got)) {
        if (got != exact[i]) ++bad;
        continue;
      }
      double err = std::fabs(got - exact[i]);
      worst = std::max(worst, err);
      if (err > 1e-9) ++bad;
    }
    return Outcome{bad == 0, fmt("%zu/200 nets off by > 1e-9, worst |diff| %.3g", bad, worst)};
  });

  criterion(2, "bound sandwich", 0, [&] {
    const Heuristic hs[] = {Heuristic::MinError, Heuristic::MinMerge, Heuristic::MinErrorMerge};
    std::size_t bad = 0, runs = 0;
    double worst = 0;
    for (std::size_t i = 0; i < nets.size(); ++i) {
      EliminationOrder order = minfill_order(primal_graph(nets[i]));
      for (std::size_t k : {2, 4, 8, 16, 32})
        for (Heuristic h : hs) {
          QuantizeConfig cfg;
          cfg.heuristic = h;
          cfg.mode = BoundMode::Upper;
          AbqResult up = abq(nets[i], k, cfg, order);
          cfg.mode = BoundMode::Lower;
          AbqResult lo = abq(nets[i], k, cfg, order);
          runs += 2;
          // Rounding slack only: the bound argument is exact arithmetic.
          if (up.log_z < exact[i] - 1e-9) {
            ++bad;
            worst = std::max(worst, exact[i] - up.log_z);
          }
          if (lo.log_z > exact[i] + 1e-9) {
            ++bad;
            worst = std::max(worst, lo.log_z - exact[i]);
          }
          for (const AbqResult* r : {&up, &lo}) {
            size_violations += r->stats.size_violations;
            size_checks += r->stats.multiplications + r->stats.quantizations;
            if (r->stats.max_intermediate_nodes > k * k) ++max_product_over_k2;
          }
        }
    }
    return Outcome{bad == 0, fmt("%zu violations in %zu runs (k in 2..32, 3 heuristics, 2 modes), worst %.3g", bad, runs, worst)};
  });

  criterion(3, "quantization size", 0, [&] {
    std::mt19937_64 rng(3);
    const Heuristic hs[] = {Heuristic::MinError, Heuristic::MinMerge, Heuristic::MinErrorMerge};
    const BoundMode ms[] = {BoundMode::Approx, BoundMode::Upper, BoundMode::Lower};
    std::size_t bad = 0;
    for (int i = 0; i < 1000; ++i) {
      std::vector<VarId> order(10);
      for (VarId v = 0; v < 10; ++v) order[v] = v;
      std::shuffle(order.begin(), order.end(), rng);
      AddStore s(order);
      auto scope = quantal::testing::distinct_vars(rng, 10, 3 + i % 8);
      ScaledAdd f = s.from_potential(quantal::testing::random_potential(rng, scope, 0.2, i % 3 == 0 ? 6 : 0));
      std::size_t n = s.node_count(f);
      QuantizeConfig cfg;
      cfg.heuristic = hs[i % 3];
      cfg.mode = ms[(i / 3) % 3];
      cfg.measure = (i / 9) % 2 ? ErrorMeasure::WeightedKL : ErrorMeasure::WeightedSquaredError;
      cfg.node_budget = 2 + quantal::testing::uniform_int(rng, 0, n);
      std::size_t out = s.node_count(quantize_to_bound(s, f, cfg));
      if (out > n || out > cfg.node_budget) ++bad;
    }
    return Outcome{bad == 0, fmt("%zu/1000 calls exceeded k or grew the ADD", bad)};
  });

  criterion(4, "canonicity", 0, [&] {
    std::mt19937_64 rng(4);
    std::size_t same_bad = 0, diff_bad = 0;
    for (int i = 0; i < 500; ++i) {
      std::vector<VarId> order{0, 1, 2, 3, 4, 5};
      std::shuffle(order.begin(), order.end(), rng);
      AddStore s(order);
      auto scope = quantal::testing::distinct_vars(rng, 6, 2 + i % 5);
      Potential p = quantal::testing::random_potential(rng, scope, 0.2, i % 2 ? 3 : 0);
      // Same function: permuted scope, scaled by a power of two, plus a constant axis.
      Potential q;
      q.scope = p.scope;
      std::shuffle(q.scope.begin(), q.scope.end(), rng);
      VarId extra = 0;
      while (std::find(p.scope.begin(), p.scope.end(), extra) != p.scope.end() && extra < 5) ++extra;
      bool add_axis = std::find(p.scope.begin(), p.scope.end(), extra) == p.scope.end();
      if (add_axis) q.scope.push_back(extra);
      q.table.resize(std::size_t{1} << q.scope.size());
      for (std::uint64_t bits = 0; bits < 64; ++bits) {
        auto x = assignment(bits, 6);
        q.table[q.index_of(x)] = 4.0 * p.value(x);
      }
      if (s.from_potential(p).root != s.from_potential(q).root) ++same_bad;

      // Different function: perturb one entry until not proportional.
      Potential r = p;
      std::size_t j = quantal::testing::uniform_int(rng, 0, r.table.size() - 1);
      r.table[j] = r.table[j] == 0.0 ? 0.5 : 0.0;
      bool proportional = true;
      double ratio = 0;
      for (std::size_t a = 0; a < p.table.size() && proportional; ++a) {
        if ((p.table[a] == 0) != (r.table[a] == 0)) proportional = false;
        else if (p.table[a] != 0) {
          double q2 = r.table[a] / p.table[a];
          if (ratio == 0) ratio = q2;
          else if (q2 != ratio) proportional = false;
        }
      }
      if (proportional) {
        r.table[j] += 1.0;
        r.table[(j + 1) % r.table.size()] += 0.25;
      }
      if (s.from_potential(p).root == s.from_potential(r).root) ++diff_bad;
    }
    return Outcome{same_bad == 0 && diff_bad == 0,
                   fmt("%zu/500 equal pairs split, %zu/500 different pairs merged", same_bad, diff_bad)};
  });

  criterion(5, "partition DP optimality", 0, [&] {
    std::mt19937_64 rng(5);
    const BoundMode ms[] = {BoundMode::Approx, BoundMode::Upper, BoundMode::Lower};
    const ErrorMeasure es[] = {ErrorMeasure::WeightedSquaredError, ErrorMeasure::WeightedKL};
    std::size_t bad = 0, checks = 0;
    for (int trial = 0; trial < 2000; ++trial) {
      std::size_t t = 1 + trial % 8;
      std::set<double> vals;
      if (trial % 4 == 0) vals.insert(0.0);
      while (vals.size() < t) vals.insert(quantal::testing::uniform(rng, 0.001, 1.0));
      std::vector<WeightedValue> v;
      for (double x : vals) v.push_back({x, std::ldexp(1.0, static_cast<int>(quantal::testing::uniform_int(rng, 0, 6)))});
      for (ErrorMeasure e : es)
        for (BoundMode m : ms)
          for (std::size_t l = 1; l <= t; ++l) {
            double want = quantal::testing::oracle_best_partition(v, l, e, m);
            double got = optimal_partition(v, l, e, m).error;
            ++checks;
            bool ok = std::isinf(want) ? std::isinf(got) : std::fabs(got - want) <= 1e-12 * (1 + want);
            if (!ok) ++bad;
          }
    }
    return Outcome{bad == 0, fmt("%zu mismatches in %zu (set, l, measure, mode) cases", bad, checks)};
  });

  criterion(6, "sum-product fixed point", 0, [&] {
    std::mt19937_64 rng(6);
    std::size_t bad = 0;
    for (int i = 0; i < 100; ++i) {
      MarkovNet net = random_net(rng, 8, 18, 0.2);
      JunctionTree t = tree_for(net);
      IabqConfig cfg;
      cfg.variant = IabqVariant::SumProduct;
      cfg.k = std::size_t{2} << (i % 6);
      IabqEngine e(net, t, cfg);
      e.iterate();
      auto first = e.messages();
      e.iterate();
      if (e.messages() != first) ++bad;
    }
    return Outcome{bad == 0, fmt("%zu/100 nets changed a message in iteration 2 (k in 4..128)", bad)};
  });

  criterion(7, "IABQ exactness at k=inf", 0, [&] {
    std::mt19937_64 rng(7);
    std::size_t tree_bad = 0, loopy_bad = 0, unconverged = 0;
    double worst_tree = 0, worst_loopy = 0;
    for (int i = 0; i < 100; ++i) {
      MarkovNet net = quantal::testing::random_tree_net(rng, 4 + i % 15, i % 2 ? 0.1 : 0.0);
      auto truth = brute_force(net).marginals;
      JunctionTree t = tree_for(net);
      for (IabqVariant v : {IabqVariant::SumProduct, IabqVariant::BeliefUpdate}) {
        IabqConfig cfg;
        cfg.variant = v;
        double kl = avg_kl(truth, iabq(net, t, cfg).marginals);
        worst_tree = std::max(worst_tree, kl);
        if (!(kl < 1e-9)) ++tree_bad;
      }
    }
    for (int i = 0; i < 100; ++i) {
      MarkovNet net = random_net(rng, 8, 14, 0.2);
      auto bf = brute_force(net);
      if (std::isinf(bf.log_z)) {
        --i;
        continue;
      }
      IabqResult r = iabq(net, tree_for(net), IabqConfig{});
      double kl = avg_kl(bf.marginals, r.marginals);
      worst_loopy = std::max(worst_loopy, kl);
      if (!r.converged) ++unconverged;
      if (!(kl < 1e-8)) ++loopy_bad;
    }
    return Outcome{tree_bad == 0 && loopy_bad == 0 && unconverged == 0,
                   fmt("trees: %zu/200 runs KL >= 1e-9 (worst %.2g); loopy: %zu/100 KL >= 1e-8 (worst %.2g), %zu unconverged",
                       tree_bad, worst_tree, loopy_bad, worst_loopy, unconverged)};
  });

  criterion(8, "Ising 8x8 KL trend", 300, [&] {
    const std::vector<std::size_t> ks{8, 16, 32, 64};
    std::vector<std::vector<double>> kl(ks.size() + 1);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      MarkovNet net = gen_ising(8, 100, seed);
      JunctionTree t = tree_for(net);
      Marginals ref = iabq(net, t, IabqConfig{}).marginals;
      for (std::size_t i = 0; i < ks.size(); ++i) {
        IabqConfig cfg;
        cfg.k = ks[i];
        kl[i].push_back(avg_kl(ref, iabq(net, t, cfg).marginals));
      }
      kl[ks.size()].push_back(0.0);
    }
    std::string series;
    bool monotone = true;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < kl.size(); ++i) {
      double m = median(kl[i]);
      series += fmt("%s%s:%.3g", i ? " " : "", i < ks.size() ? std::to_string(ks[i]).c_str() : "inf", m);
      if (m > prev) monotone = false;
      prev = m;
    }
    return Outcome{monotone, "median KL by k " + series};
  });

  criterion(9, "Ising 10x10 anytime bound", 300, [&] {
    int tighter = 0;
    double gain = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      MarkovNet net = gen_ising(10, 100, seed);
      EliminationOrder order = minfill_order(primal_graph(net));
      QuantizeConfig cfg;
      cfg.mode = BoundMode::Upper;
      double b4 = abq(net, 4, cfg, order).log_z;
      double b256 = abq(net, 256, cfg, order).log_z;
      if (b256 <= b4) ++tighter;
      gain += (b4 - b256) / std::log(10.0);
    }
    return Outcome{tighter >= 16, fmt("k=256 <= k=4 in %d/20 seeds, mean gain %.2f decades", tighter, gain / 20)};
  });

  criterion(10, "size discipline", 0, [&] {
    return Outcome{size_violations == 0 && max_product_over_k2 == 0,
                   fmt("%zu violations over %zu products/quantizations; %zu runs above k^2", size_violations, size_checks,
                       max_product_over_k2)};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
