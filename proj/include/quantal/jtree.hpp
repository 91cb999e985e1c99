#pragma once

// Junction trees and iterative message passing with quantized ADD messages
// (IABQ), in sum-product and belief-update flavours.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <set>
#include <vector>

#include "quantal/add.hpp"
#include "quantal/elimination.hpp"
#include "quantal/error.hpp"
#include "quantal/model.hpp"
#include "quantal/quantize.hpp"

namespace quantal {

struct JunctionTree {
  /// Sorted variable ids per clique.
  std::vector<std::vector<VarId>> cliques;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  /// Clique receiving each net potential; npos for empty scopes when the
  /// tree has no clique.
  std::vector<std::size_t> potential_clique;
  /// The order the tree was triangulated along; also the ADD order.
  EliminationOrder order;

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  bool contains(std::size_t clique, VarId v) const {
    return std::binary_search(cliques[clique].begin(), cliques[clique].end(), v);
  }

  std::vector<VarId> separator(std::size_t u, std::size_t v) const {
    std::vector<VarId> out;
    std::set_intersection(cliques[u].begin(), cliques[u].end(), cliques[v].begin(), cliques[v].end(),
                          std::back_inserter(out));
    return out;
  }

  std::vector<std::vector<std::size_t>> adjacency() const {
    std::vector<std::vector<std::size_t>> adj(cliques.size());
    for (auto [a, b] : edges) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    return adj;
  }
};

/// Triangulates the free variables along `order`, keeps the maximal cliques
/// and joins them by a maximum-weight spanning forest on separator size.
inline JunctionTree build_junction_tree(const MarkovNet& net, const EliminationOrder& order) {
  Graph g = primal_graph(net);
  std::vector<std::set<VarId>> adj(net.num_vars);
  for (VarId v = 0; v < net.num_vars; ++v) adj[v].insert(g.adjacency[v].begin(), g.adjacency[v].end());

  std::vector<std::vector<VarId>> candidates;
  for (VarId v : order.elimination_sequence()) {
    if (v >= net.num_vars || !net.is_free(v)) continue;
    std::vector<VarId> nb(adj[v].begin(), adj[v].end());
    std::vector<VarId> clique = nb;
    clique.push_back(v);
    std::sort(clique.begin(), clique.end());
    candidates.push_back(std::move(clique));
    for (VarId a : nb) {
      adj[a].erase(v);
      for (VarId b : nb)
        if (a != b) adj[a].insert(b);
    }
    adj[v].clear();
  }

  JunctionTree tree;
  tree.order = order;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    bool maximal = true;
    for (std::size_t j = 0; j < candidates.size() && maximal; ++j) {
      if (i == j) continue;
      const auto& a = candidates[i];
      const auto& b = candidates[j];
      bool subset = std::includes(b.begin(), b.end(), a.begin(), a.end());
      // Equal cliques: keep the first.
      if (subset && (b.size() > a.size() || j < i)) maximal = false;
    }
    if (maximal) tree.cliques.push_back(candidates[i]);
  }

  struct Candidate {
    std::size_t weight, a, b;
  };
  std::vector<Candidate> pairs;
  for (std::size_t a = 0; a < tree.cliques.size(); ++a)
    for (std::size_t b = a + 1; b < tree.cliques.size(); ++b) {
      std::size_t w = tree.separator(a, b).size();
      if (w > 0) pairs.push_back({w, a, b});
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Candidate& x, const Candidate& y) { return x.weight > y.weight; });
  std::vector<std::size_t> dsu(tree.cliques.size());
  std::iota(dsu.begin(), dsu.end(), 0);
  auto find = [&](std::size_t x) {
    while (dsu[x] != x) x = dsu[x] = dsu[dsu[x]];
    return x;
  };
  for (const auto& c : pairs) {
    std::size_t ra = find(c.a), rb = find(c.b);
    if (ra == rb) continue;
    dsu[ra] = rb;
    tree.edges.push_back({c.a, c.b});
  }

  for (const auto& p : net.potentials) {
    std::vector<VarId> scope = p.scope;
    std::sort(scope.begin(), scope.end());
    std::size_t best = JunctionTree::npos;
    for (std::size_t c = 0; c < tree.cliques.size(); ++c) {
      const auto& cl = tree.cliques[c];
      if (!std::includes(cl.begin(), cl.end(), scope.begin(), scope.end())) continue;
      if (best == JunctionTree::npos || cl.size() < tree.cliques[best].size()) best = c;
    }
    if (best == JunctionTree::npos && !scope.empty())
      throw Error(ErrorKind::BadParameter, "potential scope not covered by any clique");
    tree.potential_clique.push_back(best);
  }
  return tree;
}

enum class IabqVariant { SumProduct, BeliefUpdate };

inline const char* to_string(IabqVariant v) {
  return v == IabqVariant::SumProduct ? "sum-product" : "belief-update";
}

struct IabqConfig {
  IabqVariant variant = IabqVariant::BeliefUpdate;
  std::size_t k = kUnbounded;
  QuantizeConfig quantize{Heuristic::MinErrorMerge, BoundMode::Approx, 2, ErrorMeasure::WeightedSquaredError};
  std::size_t max_iterations = 50;
  double epsilon = 1e-6;
  /// Quantize belief-update messages again after the division step.
  bool requantize_after_division = false;
  std::optional<Clock::time_point> deadline;
  std::size_t max_nodes = AddStore::kUnlimited;
};

struct IabqResult {
  Marginals marginals;
  std::size_t iterations_used = 0;
  bool converged = false;
  /// Largest message change per iteration.
  std::vector<double> residuals;
};

/// Message-passing state for one run; owns its AddStore.
class IabqEngine {
 public:
  IabqEngine(const MarkovNet& net, const JunctionTree& tree, const IabqConfig& cfg)
      : net_(net), tree_(tree), cfg_(cfg), store_(free_levels(net, tree.order), cfg.max_nodes) {
    if (cfg.max_iterations < 1) throw Error(ErrorKind::BadParameter, "max_iterations must be >= 1");
    if (!(cfg.epsilon > 0)) throw Error(ErrorKind::BadParameter, "epsilon must be > 0");
    qcfg_ = cfg.quantize;
    if (cfg.k != kUnbounded) qcfg_.node_budget = cfg.k;

    const std::size_t nc = tree.cliques.size();
    clique_potentials_.resize(nc);
    for (std::size_t i = 0; i < net.potentials.size(); ++i) {
      std::size_t c = tree.potential_clique[i];
      if (c == JunctionTree::npos) continue;
      clique_potentials_[c].push_back(store_.from_potential(net.potentials[i]));
    }
    neighbors_.resize(nc);
    for (std::size_t e = 0; e < tree.edges.size(); ++e) {
      auto [a, b] = tree.edges[e];
      neighbors_[a].push_back({b, 2 * e, 2 * e + 1});
      neighbors_[b].push_back({a, 2 * e + 1, 2 * e});
    }
    messages_.assign(2 * tree.edges.size(), store_.one());
    build_schedule();
  }

  AddStore& store() { return store_; }
  const std::vector<ScaledAdd>& messages() const { return messages_; }

  /// Message u -> v.
  const ScaledAdd& message(std::size_t u, std::size_t v) const { return messages_[directed(u, v)]; }

  /// Largest node count of any product right after its last quantization,
  /// over all messages sent so far.
  std::size_t max_quantized_nodes() const { return max_quantized_nodes_; }

  void send_message(std::size_t u, std::size_t v) {
    check_deadline();
    const std::size_t out_id = directed(u, v);
    const std::size_t back_id = directed(v, u);
    const bool belief_update = cfg_.variant == IabqVariant::BeliefUpdate;

    std::vector<ScaledAdd> factors = clique_potentials_[u];
    for (const auto& nb : neighbors_[u])
      if (belief_update || nb.clique != v) factors.push_back(messages_[nb.in]);
    ScaledAdd product = bounded_product(factors);

    std::vector<VarId> eliminate;
    std::set_difference(tree_.cliques[u].begin(), tree_.cliques[u].end(), tree_.cliques[v].begin(),
                        tree_.cliques[v].end(), std::back_inserter(eliminate));
    product = store_.sum_out(product, eliminate);

    if (belief_update) {
      product = store_.divide(product, messages_[back_id]);
      if (cfg_.requantize_after_division && cfg_.k != kUnbounded) product = quantize_to_bound(store_, product, qcfg_);
    }
    messages_[out_id] = product;
    maybe_collect();
  }

  /// One inward and one outward sweep. Returns the largest change of any
  /// message, each compared after rescaling to max-leaf 1.
  double iterate() {
    previous_ = messages_;
    for (auto [u, v] : inward_) send_message(u, v);
    for (auto it = inward_.rbegin(); it != inward_.rend(); ++it) send_message(it->second, it->first);
    double residual = 0.0;
    for (std::size_t i = 0; i < messages_.size(); ++i) {
      if (messages_[i].root == previous_[i].root) continue;
      ScaledAdd diff = store_.apply(AddOp::Subtract, {messages_[i].root, 0.0}, {previous_[i].root, 0.0});
      if (!store_.is_zero(diff)) residual = std::max(residual, std::exp(diff.log_scale));
    }
    previous_.clear();
    return residual;
  }

  /// Normalized marginal of v computed in clique c.
  Marginal marginal_from_clique(VarId v, std::size_t c) {
    if (!tree_.contains(c, v)) throw Error(ErrorKind::BadParameter, "variable not in clique");
    ScaledAdd b = belief(c);
    std::vector<VarId> others;
    for (VarId x : tree_.cliques[c])
      if (x != v) others.push_back(x);
    b = store_.sum_out(b, others);
    return to_marginal(b, v);
  }

  Marginals marginals() {
    Marginals out(net_.num_vars, Marginal{0.5, 0.5});
    std::vector<std::vector<VarId>> wanted(tree_.cliques.size());
    for (VarId v = 0; v < net_.num_vars; ++v) {
      if (!net_.is_free(v)) {
        std::uint8_t val = net_.evidence.assignments.at(v);
        out[v] = val ? Marginal{0.0, 1.0} : Marginal{1.0, 0.0};
        continue;
      }
      std::size_t best = JunctionTree::npos;
      for (std::size_t c = 0; c < tree_.cliques.size(); ++c)
        if (tree_.contains(c, v) && (best == JunctionTree::npos || tree_.cliques[c].size() < tree_.cliques[best].size()))
          best = c;
      if (best != JunctionTree::npos) wanted[best].push_back(v);
    }
    for (std::size_t c = 0; c < wanted.size(); ++c) {
      if (wanted[c].empty()) continue;
      ScaledAdd b = belief(c);
      for (VarId v : wanted[c]) {
        std::vector<VarId> others;
        for (VarId x : tree_.cliques[c])
          if (x != v) others.push_back(x);
        out[v] = to_marginal(store_.sum_out(b, others), v);
      }
    }
    return out;
  }

  IabqResult run() {
    IabqResult result;
    for (std::size_t it = 1; it <= cfg_.max_iterations; ++it) {
      double r = iterate();
      result.residuals.push_back(r);
      result.iterations_used = it;
      if (r < cfg_.epsilon) {
        result.converged = true;
        break;
      }
    }
    result.marginals = marginals();
    return result;
  }

 private:
  struct Neighbor {
    std::size_t clique;
    std::size_t out;  // message clique -> neighbour
    std::size_t in;   // message neighbour -> clique
  };

  static std::vector<VarId> free_levels(const MarkovNet& net, const EliminationOrder& order) {
    std::vector<VarId> levels;
    for (VarId v : order.order)
      if (v < net.num_vars && net.is_free(v)) levels.push_back(v);
    return levels;
  }

  std::size_t directed(std::size_t u, std::size_t v) const {
    for (const auto& nb : neighbors_[u])
      if (nb.clique == v) return nb.out;
    throw Error(ErrorKind::BadParameter, "cliques are not adjacent");
  }

  void build_schedule() {
    const std::size_t nc = tree_.cliques.size();
    std::vector<char> seen(nc, 0);
    std::vector<std::size_t> by_size(nc);
    std::iota(by_size.begin(), by_size.end(), 0);
    std::stable_sort(by_size.begin(), by_size.end(),
                     [&](std::size_t a, std::size_t b) { return tree_.cliques[a].size() > tree_.cliques[b].size(); });
    for (std::size_t root : by_size) {
      if (seen[root]) continue;
      // BFS from the root of this component; inward edges in reverse BFS order.
      std::vector<std::pair<std::size_t, std::size_t>> down;
      std::queue<std::size_t> q;
      q.push(root);
      seen[root] = 1;
      while (!q.empty()) {
        std::size_t u = q.front();
        q.pop();
        for (const auto& nb : neighbors_[u]) {
          if (seen[nb.clique]) continue;
          seen[nb.clique] = 1;
          down.push_back({u, nb.clique});
          q.push(nb.clique);
        }
      }
      for (auto it = down.rbegin(); it != down.rend(); ++it) inward_.push_back({it->second, it->first});
    }
  }

  ScaledAdd bounded_product(std::vector<ScaledAdd> factors) {
    std::vector<std::pair<std::size_t, std::size_t>> sizes;
    for (std::size_t i = 0; i < factors.size(); ++i) sizes.push_back({store_.node_count(factors[i]), i});
    std::stable_sort(sizes.begin(), sizes.end());
    ScaledAdd product = store_.one();
    for (auto [size, i] : sizes) {
      (void)size;
      product = store_.multiply(product, factors[i]);
      if (cfg_.k != kUnbounded && store_.node_count(product) > cfg_.k) {
        product = quantize_to_bound(store_, product, qcfg_);
        max_quantized_nodes_ = std::max(max_quantized_nodes_, store_.node_count(product));
      }
    }
    return product;
  }

  ScaledAdd belief(std::size_t c) {
    std::vector<ScaledAdd> factors = clique_potentials_[c];
    for (const auto& nb : neighbors_[c]) factors.push_back(messages_[nb.in]);
    return bounded_product(factors);
  }

  Marginal to_marginal(const ScaledAdd& f, VarId v) {
    double l1 = store_.constant_log_value(store_.restrict(f, v, 1));
    double l0 = store_.constant_log_value(store_.restrict(f, v, 0));
    if (std::isinf(l0) && std::isinf(l1)) return {0.5, 0.5};
    double p1 = 1.0 / (1.0 + std::exp(l0 - l1));
    return {1.0 - p1, p1};
  }

  void check_deadline() const {
    if (cfg_.deadline && Clock::now() > *cfg_.deadline) throw Error(ErrorKind::Timeout, "IABQ deadline exceeded");
  }

  void maybe_collect() {
    if (!store_.should_collect()) return;
    std::vector<NodeRef> roots;
    for (const auto& ps : clique_potentials_)
      for (const auto& p : ps) roots.push_back(p.root);
    for (const auto& m : messages_) roots.push_back(m.root);
    for (const auto& m : previous_) roots.push_back(m.root);
    store_.collect(std::span<const NodeRef>(roots));
  }

  const MarkovNet& net_;
  const JunctionTree& tree_;
  IabqConfig cfg_;
  QuantizeConfig qcfg_;
  AddStore store_;
  std::vector<std::vector<ScaledAdd>> clique_potentials_;
  std::vector<std::vector<Neighbor>> neighbors_;
  std::vector<ScaledAdd> messages_;
  std::vector<ScaledAdd> previous_;
  std::vector<std::pair<std::size_t, std::size_t>> inward_;
  std::size_t max_quantized_nodes_ = 0;
};

inline IabqResult iabq(const MarkovNet& net, const JunctionTree& tree, const IabqConfig& cfg) {
  IabqEngine engine(net, tree, cfg);
  return engine.run();
}

}  // namespace quantal
