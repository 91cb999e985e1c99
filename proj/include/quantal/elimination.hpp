#pragma once

// Elimination orderings and bucket elimination over ADDs with quantization
// (ABQ). With an unbounded budget ABQ is exact ADD bucket elimination; with a
// finite budget k every ADD kept in a bucket has at most k nodes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "quantal/add.hpp"
#include "quantal/error.hpp"
#include "quantal/model.hpp"
#include "quantal/quantize.hpp"

namespace quantal {

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

using Clock = std::chrono::steady_clock;

/// order = (X1, ..., Xn). Elimination runs from Xn down to X1, so order[i] is
/// also the ADD level of variable order[i]: the first eliminated variable sits
/// nearest the leaves.
struct EliminationOrder {
  std::vector<VarId> order;
  std::size_t induced_width = 0;

  std::vector<VarId> elimination_sequence() const { return {order.rbegin(), order.rend()}; }
};

/// Width of eliminating along `order` (last entry first) on `g`.
inline std::size_t induced_width(const Graph& g, const std::vector<VarId>& order) {
  std::vector<std::set<VarId>> adj(g.num_vertices());
  for (VarId v = 0; v < g.num_vertices(); ++v) adj[v].insert(g.adjacency[v].begin(), g.adjacency[v].end());
  std::size_t width = 0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarId v = *it;
    width = std::max(width, adj[v].size());
    std::vector<VarId> nb(adj[v].begin(), adj[v].end());
    for (VarId a : nb) {
      adj[a].erase(v);
      for (VarId b : nb)
        if (a != b) adj[a].insert(b);
    }
    adj[v].clear();
  }
  return width;
}

/// Greedy min-fill: eliminate the vertex adding the fewest fill edges, ties
/// by smaller current degree, then smaller id.
inline EliminationOrder minfill_order(const Graph& g) {
  const std::size_t n = g.num_vertices();
  std::vector<std::set<VarId>> adj(n);
  for (VarId v = 0; v < n; ++v) adj[v].insert(g.adjacency[v].begin(), g.adjacency[v].end());
  auto fill_of = [&](VarId v) {
    std::size_t fill = 0;
    for (auto a = adj[v].begin(); a != adj[v].end(); ++a)
      for (auto b = std::next(a); b != adj[v].end(); ++b)
        if (!adj[*a].contains(*b)) ++fill;
    return fill;
  };
  std::vector<std::size_t> fill(n);
  for (VarId v = 0; v < n; ++v) fill[v] = fill_of(v);
  std::vector<char> done(n, 0);
  std::vector<VarId> sequence;
  sequence.reserve(n);
  std::size_t width = 0;
  for (std::size_t step = 0; step < n; ++step) {
    VarId best = 0;
    bool found = false;
    for (VarId v = 0; v < n; ++v) {
      if (done[v]) continue;
      if (!found || fill[v] < fill[best] || (fill[v] == fill[best] && adj[v].size() < adj[best].size())) {
        best = v;
        found = true;
      }
    }
    VarId v = best;
    width = std::max(width, adj[v].size());
    std::vector<VarId> nb(adj[v].begin(), adj[v].end());
    for (VarId a : nb) {
      adj[a].erase(v);
      for (VarId b : nb)
        if (a != b) adj[a].insert(b);
    }
    adj[v].clear();
    done[v] = 1;
    sequence.push_back(v);
    // Fill counts can only change within distance two of v.
    std::set<VarId> touched(nb.begin(), nb.end());
    for (VarId a : nb) touched.insert(adj[a].begin(), adj[a].end());
    for (VarId t : touched) fill[t] = fill_of(t);
  }
  EliminationOrder out;
  out.order.assign(sequence.rbegin(), sequence.rend());
  out.induced_width = width;
  return out;
}

struct AbqStats {
  /// Largest ADD produced by a multiplication or sum-out, before quantization.
  std::size_t max_intermediate_nodes = 0;
  std::size_t multiplications = 0;
  std::size_t quantizations = 0;
  /// Products above k^2 nodes or quantized ADDs above k nodes.
  std::size_t size_violations = 0;
};

struct AbqResult {
  /// ln Z, or an upper/lower bound or estimate of it.
  double log_z = 0.0;
  AbqStats stats;
  /// True when no ADD ever exceeded the budget, so log_z is exact.
  bool exact = true;
};

struct AbqOptions {
  std::size_t k = kUnbounded;
  QuantizeConfig quantize;
  std::optional<EliminationOrder> order;
  std::optional<Clock::time_point> deadline;
  std::size_t max_nodes = AddStore::kUnlimited;
};

/// One-pass bucket elimination with quantization.
inline AbqResult abq(const MarkovNet& net, const AbqOptions& opts) {
  const EliminationOrder order = opts.order ? *opts.order : minfill_order(primal_graph(net));
  std::vector<VarId> levels;
  for (VarId v : order.order)
    if (v < net.num_vars && net.is_free(v)) levels.push_back(v);
  if (levels.size() != net.free_variables().size())
    throw Error(ErrorKind::BadParameter, "elimination order does not cover every free variable");

  const bool bounded = opts.k != kUnbounded;
  QuantizeConfig qcfg = opts.quantize;
  if (bounded) qcfg.node_budget = opts.k;

  AddStore store(levels, opts.max_nodes);
  AbqResult result;

  struct Entry {
    ScaledAdd f;
    std::size_t nodes;
    std::uint64_t seq;
  };
  std::vector<std::vector<Entry>> buckets(levels.size());
  std::uint64_t seq = 0;
  double z_log = 0.0;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  auto place = [&](const ScaledAdd& f, std::size_t nodes) {
    if (store.is_constant(f)) {
      z_log += store.constant_log_value(f);
      return;
    }
    buckets[*store.deepest_level(f)].push_back({f, nodes, seq++});
  };
  auto bound = [&](ScaledAdd f, std::size_t nodes) {
    if (bounded && nodes > opts.k) {
      f = quantize_to_bound(store, f, qcfg);
      nodes = store.node_count(f);
      ++result.stats.quantizations;
      result.exact = false;
      if (nodes > opts.k) ++result.stats.size_violations;
    }
    place(f, nodes);
  };
  auto check_deadline = [&] {
    if (opts.deadline && Clock::now() > *opts.deadline) throw Error(ErrorKind::Timeout, "ABQ deadline exceeded");
  };

  for (const auto& p : net.potentials) {
    for (VarId v : p.scope)
      if (!net.is_free(v)) throw Error(ErrorKind::BadParameter, "potential mentions an evidence variable");
    ScaledAdd f = store.from_potential(p);
    bound(f, store.node_count(f));
  }

  for (std::size_t li = levels.size(); li-- > 0;) {
    if (z_log == neg_inf) break;
    auto& bucket = buckets[li];
    bool summed = false;
    while (!bucket.empty()) {
      check_deadline();
      if (bucket.size() == 1) {
        Entry e = bucket.back();
        bucket.pop_back();
        ScaledAdd g = store.sum_out(e.f, levels[li]);
        summed = true;
        std::size_t nodes = store.node_count(g);
        result.stats.max_intermediate_nodes = std::max(result.stats.max_intermediate_nodes, nodes);
        bound(g, nodes);
      } else {
        // The two smallest ADDs, oldest first on ties.
        auto smaller = [](const Entry& a, const Entry& b) {
          return a.nodes != b.nodes ? a.nodes < b.nodes : a.seq < b.seq;
        };
        std::sort(bucket.begin(), bucket.end(), smaller);
        Entry a = bucket[0];
        Entry b = bucket[1];
        bucket.erase(bucket.begin(), bucket.begin() + 2);
        ScaledAdd product = store.multiply(a.f, b.f);
        std::size_t nodes = store.node_count(product);
        ++result.stats.multiplications;
        result.stats.max_intermediate_nodes = std::max(result.stats.max_intermediate_nodes, nodes);
        if (nodes > a.nodes * b.nodes) ++result.stats.size_violations;
        if (bounded && opts.k <= (std::size_t{1} << 31) && nodes > opts.k * opts.k) ++result.stats.size_violations;
        bound(product, nodes);
      }
      if (store.should_collect()) {
        std::vector<NodeRef> roots;
        for (const auto& bk : buckets)
          for (const auto& e : bk) roots.push_back(e.f.root);
        store.collect(std::span<const NodeRef>(roots));
      }
    }
    // The variable is still summed over when no ADD mentions it any more.
    if (!summed) z_log += std::log(2.0);
  }
  result.log_z = z_log;
  return result;
}

inline AbqResult abq(const MarkovNet& net, std::size_t k, const QuantizeConfig& cfg, const EliminationOrder& order) {
  AbqOptions opts;
  opts.k = k;
  opts.quantize = cfg;
  opts.order = order;
  return abq(net, opts);
}

struct AnytimeRecord {
  std::size_t k = 0;
  double log_z = 0.0;
  double elapsed_ms = 0.0;
  std::size_t max_intermediate_nodes = 0;
  bool exact = false;
  /// "ok", or the error kind that ended this step.
  std::string status = "ok";
};

struct AnytimeOptions {
  QuantizeConfig quantize;
  std::size_t k_start = 2;
  std::size_t k_max = kUnbounded;
  std::optional<EliminationOrder> order;
  std::optional<Clock::time_point> deadline;
  std::size_t max_nodes = AddStore::kUnlimited;
};

/// Runs ABQ with k = k_start, 2 k_start, 4 k_start, ... Stops after an exact
/// run, at k_max, on timeout or when the node pool is exhausted. Other errors
/// are recorded and the schedule continues.
inline std::vector<AnytimeRecord> abq_anytime(const MarkovNet& net, const AnytimeOptions& opts,
                                              const std::function<void(const AnytimeRecord&)>& on_record = {}) {
  if (opts.k_start < 2) throw Error(ErrorKind::BadParameter, "k must be >= 2");
  AbqOptions run;
  run.quantize = opts.quantize;
  run.order = opts.order ? *opts.order : minfill_order(primal_graph(net));
  run.deadline = opts.deadline;
  run.max_nodes = opts.max_nodes;
  std::vector<AnytimeRecord> records;
  for (std::size_t k = opts.k_start; k <= opts.k_max;) {
    AnytimeRecord rec;
    rec.k = k;
    auto start = Clock::now();
    bool stop = false;
    try {
      run.k = k;
      AbqResult r = abq(net, run);
      rec.log_z = r.log_z;
      rec.max_intermediate_nodes = r.stats.max_intermediate_nodes;
      rec.exact = r.exact;
      stop = r.exact;
    } catch (const Error& e) {
      rec.status = to_string(e.kind());
      rec.log_z = std::numeric_limits<double>::quiet_NaN();
      stop = e.kind() == ErrorKind::Timeout || e.kind() == ErrorKind::OutOfBudget;
    }
    rec.elapsed_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    records.push_back(rec);
    if (on_record) on_record(rec);
    if (stop || k > opts.k_max / 2) break;
    k *= 2;
  }
  return records;
}

}  // namespace quantal
