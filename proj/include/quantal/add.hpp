#pragma once

// Reduced ordered algebraic decision diagrams over binary variables.
//
// An AddStore owns a hash-consed node pool. Every node is created through
// make_node()/leaf(), which apply the two reduction rules (no node with
// identical children, no duplicate content), so structurally equal functions
// share one NodeRef. Functions handed to callers are ScaledAdds: a root plus a
// natural-log scale, normalized so the largest |leaf| is exactly 1.
//
// Levels: order[i] is tested at level i. Level 0 is nearest the root; leaves
// sit below every level.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <memory_resource>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "quantal/error.hpp"
#include "quantal/model.hpp"

namespace quantal {

using NodeRef = std::uint32_t;

inline constexpr std::uint32_t kLeafLevel = std::numeric_limits<std::uint32_t>::max();
inline constexpr std::uint32_t kFreeLevel = kLeafLevel - 1;

struct AddNode {
  std::uint32_t level = kLeafLevel;
  NodeRef hi = 0;
  NodeRef lo = 0;
  double value = 0.0;

  bool is_leaf() const { return level == kLeafLevel; }
};

/// exp(log_scale) * (function rooted at root).
struct ScaledAdd {
  NodeRef root = 0;
  double log_scale = 0.0;

  bool operator==(const ScaledAdd&) const = default;
};

enum class AddOp : std::uint8_t { Multiply, Add, Subtract, Divide, Max, Min };

struct LeafInfo {
  NodeRef ref;
  double value;
  /// Number of assignments over the support that reach this leaf.
  double mass;
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}

struct NodeKey {
  std::uint32_t level;
  NodeRef hi;
  NodeRef lo;
  bool operator==(const NodeKey&) const = default;
};

struct NodeKeyHash {
  std::size_t operator()(const NodeKey& k) const {
    return mix64((std::uint64_t{k.hi} << 32 | k.lo) ^ mix64(k.level + 0x9e3779b97f4a7c15ULL));
  }
};

struct ApplyKey {
  AddOp op;
  NodeRef f;
  NodeRef g;
  bool operator==(const ApplyKey&) const = default;
};

struct ApplyKeyHash {
  std::size_t operator()(const ApplyKey& k) const {
    return mix64((std::uint64_t{k.f} << 32 | k.g) ^ (std::uint64_t(k.op) << 61));
  }
};

inline std::uint64_t value_bits(double v) {
  if (v == 0.0) v = 0.0;  // fold -0.0
  return std::bit_cast<std::uint64_t>(v);
}

inline bool commutative(AddOp op) {
  return op == AddOp::Multiply || op == AddOp::Add || op == AddOp::Max || op == AddOp::Min;
}

}  // namespace detail

class AddStore {
 public:
  static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

  /// `order[i]` is the variable tested at level i.
  explicit AddStore(std::vector<VarId> order, std::size_t max_nodes = kUnlimited)
      : order_(std::move(order)), max_nodes_(max_nodes) {
    VarId top = 0;
    for (VarId v : order_) top = std::max(top, v);
    level_of_.assign(order_.empty() ? 0 : std::size_t{top} + 1, kLeafLevel);
    for (std::uint32_t i = 0; i < order_.size(); ++i) {
      if (level_of_[order_[i]] != kLeafLevel) throw Error(ErrorKind::BadParameter, "variable repeated in ADD order");
      level_of_[order_[i]] = i;
    }
  }

  const std::vector<VarId>& order() const { return order_; }
  std::size_t num_levels() const { return order_.size(); }

  bool has_var(VarId v) const { return v < level_of_.size() && level_of_[v] != kLeafLevel; }

  std::uint32_t level_of(VarId v) const {
    if (!has_var(v)) throw Error(ErrorKind::UnorderedVariable, "variable " + std::to_string(v) + " is not in the ADD order");
    return level_of_[v];
  }

  VarId var_at(std::uint32_t level) const { return order_[level]; }

  const AddNode& node(NodeRef r) const { return nodes_[r]; }

  /// Live nodes in the pool.
  std::size_t pool_size() const { return live_; }

  // ---------------------------------------------------------------- nodes

  NodeRef leaf(double value) {
    if (std::isnan(value)) throw Error(ErrorKind::BadParameter, "NaN leaf value");
    if (value == 0.0) value = 0.0;
    auto bits = detail::value_bits(value);
    if (auto it = leaf_table_.find(bits); it != leaf_table_.end()) return it->second;
    NodeRef r = allocate(AddNode{kLeafLevel, 0, 0, value});
    leaf_table_.emplace(bits, r);
    return r;
  }

  /// Reduced node constructor: returns `hi` when both children coincide.
  NodeRef make_node(std::uint32_t level, NodeRef hi, NodeRef lo) {
    if (hi == lo) return hi;
    detail::NodeKey key{level, hi, lo};
    if (auto it = unique_.find(key); it != unique_.end()) return it->second;
    NodeRef r = allocate(AddNode{level, hi, lo, 0.0});
    unique_.emplace(key, r);
    return r;
  }

  NodeRef zero_leaf() { return leaf(0.0); }
  NodeRef one_leaf() { return leaf(1.0); }

  ScaledAdd one() { return {one_leaf(), 0.0}; }
  ScaledAdd zero() { return {zero_leaf(), 0.0}; }

  ScaledAdd constant(double c) {
    if (!(c >= 0) || !std::isfinite(c)) throw Error(ErrorKind::BadParameter, "constant must be finite and >= 0");
    if (c == 0.0) return zero();
    return {one_leaf(), std::log(c)};
  }

  bool is_constant(const ScaledAdd& f) const { return nodes_[f.root].is_leaf(); }
  bool is_zero(const ScaledAdd& f) const { return nodes_[f.root].is_leaf() && nodes_[f.root].value == 0.0; }

  /// ln of the value of a constant function; -inf for the zero function.
  double constant_log_value(const ScaledAdd& f) const {
    const AddNode& n = nodes_[f.root];
    if (!n.is_leaf()) throw Error(ErrorKind::BadParameter, "function is not constant");
    if (n.value == 0.0) return -std::numeric_limits<double>::infinity();
    return f.log_scale + std::log(n.value);
  }

  // ------------------------------------------------------------ building

  ScaledAdd from_potential(const Potential& p) {
    const std::size_t s = p.scope.size();
    if (p.table.size() != (std::size_t{1} << s)) throw Error(ErrorKind::SyntaxError, "table size does not match scope");
    // Scope positions sorted by ADD level.
    std::vector<std::size_t> by_level(s);
    for (std::size_t i = 0; i < s; ++i) by_level[i] = i;
    std::vector<std::uint32_t> levels(s);
    for (std::size_t i = 0; i < s; ++i) levels[i] = level_of(p.scope[i]);
    std::sort(by_level.begin(), by_level.end(), [&](std::size_t a, std::size_t b) { return levels[a] < levels[b]; });

    double top = 0.0;
    for (double x : p.table) {
      if (!(x >= 0) || !std::isfinite(x)) throw Error(ErrorKind::NegativeValue, "table entries must be finite and >= 0");
      top = std::max(top, x);
    }
    if (top == 0.0) return zero();

    std::function<NodeRef(std::size_t, std::size_t)> build = [&](std::size_t depth, std::size_t idx) -> NodeRef {
      if (depth == s) return leaf(p.table[idx] / top);
      std::size_t pos = by_level[depth];
      std::size_t bit = std::size_t{1} << (s - 1 - pos);
      NodeRef hi = build(depth + 1, idx | bit);
      NodeRef lo = build(depth + 1, idx);
      return make_node(levels[pos], hi, lo);
    };
    return {build(0, 0), std::log(top)};
  }

  // ---------------------------------------------------------- operations

  ScaledAdd apply(AddOp op, ScaledAdd f, ScaledAdd g) {
    switch (op) {
      case AddOp::Multiply:
        return normalize(apply_rec(op, f.root, g.root), f.log_scale + g.log_scale);
      case AddOp::Divide: {
        // Leaves are at most 1, so a quotient can only overflow when a
        // denominator leaf is subnormal. Lift the denominator into the
        // normal range first.
        int lift = 0;
        for (NodeRef r : visit(g.root)) {
          double y = nodes_[r].is_leaf() ? std::fabs(nodes_[r].value) : 0.0;
          if (y > 0.0 && y < std::numeric_limits<double>::min())
            lift = std::max(lift, std::numeric_limits<double>::min_exponent - 1 - std::ilogb(y));
        }
        NodeRef gr = g.root;
        if (lift > 0) gr = map_leaves(g.root, [lift](NodeRef, double y) { return std::ldexp(y, lift); });
        return normalize(apply_rec(op, f.root, gr), f.log_scale - g.log_scale + lift * std::log(2.0));
      }
      default:
        break;
    }
    // Additive ops: bring both operands to the larger scale first. The zero
    // function carries no meaningful scale.
    if (is_zero(f)) f.log_scale = g.log_scale;
    if (is_zero(g)) g.log_scale = f.log_scale;
    double common = std::max(f.log_scale, g.log_scale);
    NodeRef fr = rescale(f.root, f.log_scale - common);
    NodeRef gr = rescale(g.root, g.log_scale - common);
    return normalize(apply_rec(op, fr, gr), common);
  }

  ScaledAdd multiply(const ScaledAdd& f, const ScaledAdd& g) { return apply(AddOp::Multiply, f, g); }
  ScaledAdd divide(const ScaledAdd& f, const ScaledAdd& g) { return apply(AddOp::Divide, f, g); }
  ScaledAdd add(const ScaledAdd& f, const ScaledAdd& g) { return apply(AddOp::Add, f, g); }

  /// result(x) = f(x[v<-0]) + f(x[v<-1]).
  ScaledAdd sum_out(const ScaledAdd& f, VarId v) {
    const std::uint32_t lv = level_of(v);
    std::unordered_map<NodeRef, NodeRef> memo;
    std::unordered_map<NodeRef, NodeRef> doubled;
    std::function<NodeRef(NodeRef)> rec = [&](NodeRef r) -> NodeRef {
      AddNode n = nodes_[r];
      if (n.level > lv) return map_leaves(r, [](NodeRef, double x) { return 2.0 * x; }, doubled);
      if (auto it = memo.find(r); it != memo.end()) return it->second;
      NodeRef out = n.level == lv ? apply_rec(AddOp::Add, n.hi, n.lo) : make_node(n.level, rec(n.hi), rec(n.lo));
      memo.emplace(r, out);
      return out;
    };
    return normalize(rec(f.root), f.log_scale);
  }

  ScaledAdd sum_out(ScaledAdd f, std::span<const VarId> vars) {
    for (VarId v : vars) f = sum_out(f, v);
    return f;
  }

  /// result(x) = f(x with v = val).
  ScaledAdd restrict(const ScaledAdd& f, VarId v, int val) {
    const std::uint32_t lv = level_of(v);
    std::unordered_map<NodeRef, NodeRef> memo;
    std::function<NodeRef(NodeRef)> rec = [&](NodeRef r) -> NodeRef {
      AddNode n = nodes_[r];
      if (n.level > lv) return r;
      if (n.level == lv) return val ? n.hi : n.lo;
      if (auto it = memo.find(r); it != memo.end()) return it->second;
      NodeRef out = make_node(n.level, rec(n.hi), rec(n.lo));
      memo.emplace(r, out);
      return out;
    };
    return normalize(rec(f.root), f.log_scale);
  }

  // ------------------------------------------------------------- queries

  /// Reachable nodes sorted by level (parents before children), then ref.
  std::vector<NodeRef> reachable(NodeRef root) const {
    std::vector<NodeRef> out = visit(root);
    std::vector<std::uint64_t> keys(out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      keys[i] = (std::uint64_t{nodes_[out[i]].level} << 32) | out[i];
    std::sort(keys.begin(), keys.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<NodeRef>(keys[i]);
    return out;
  }

  /// Internal plus leaf nodes.
  std::size_t node_count(NodeRef root) const { return visit(root).size(); }
  std::size_t node_count(const ScaledAdd& f) const { return node_count(f.root); }

  /// Support levels, ascending.
  std::vector<std::uint32_t> support_levels(NodeRef root) const {
    std::vector<std::uint32_t> levels;
    for (NodeRef r : reachable(root))
      if (!nodes_[r].is_leaf()) levels.push_back(nodes_[r].level);
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    return levels;
  }

  /// Support variables, in ADD order.
  std::vector<VarId> support(const ScaledAdd& f) const {
    std::vector<VarId> vars;
    for (auto l : support_levels(f.root)) vars.push_back(order_[l]);
    return vars;
  }

  /// Deepest level tested by the function, i.e. its highest ordered variable.
  std::optional<std::uint32_t> deepest_level(const ScaledAdd& f) const {
    auto levels = support_levels(f.root);
    if (levels.empty()) return std::nullopt;
    return levels.back();
  }

  /// Leaves sorted by value with their assignment mass over the support.
  std::vector<LeafInfo> leaves(NodeRef root) const {
    auto nodes = reachable(root);
    std::vector<std::uint32_t> levels;
    for (NodeRef r : nodes)
      if (!nodes_[r].is_leaf()) levels.push_back(nodes_[r].level);
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    const int depth = static_cast<int>(levels.size());
    auto index_of = [&](NodeRef r) -> int {
      const AddNode& n = nodes_[r];
      if (n.is_leaf()) return depth;
      return static_cast<int>(std::lower_bound(levels.begin(), levels.end(), n.level) - levels.begin());
    };
    if (slot_.size() < nodes_.size()) slot_.resize(nodes_.size());
    for (std::uint32_t i = 0; i < nodes.size(); ++i) slot_[nodes[i]] = i;
    std::vector<double> count(nodes.size(), 0.0);
    count[0] = std::ldexp(1.0, index_of(root));
    std::vector<LeafInfo> out;
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      const NodeRef r = nodes[j];
      const AddNode& n = nodes_[r];
      const double c = count[j];
      if (n.is_leaf()) {
        out.push_back({r, n.value, c});
        continue;
      }
      int i = index_of(r);
      count[slot_[n.hi]] += c * std::ldexp(1.0, index_of(n.hi) - i - 1);
      count[slot_[n.lo]] += c * std::ldexp(1.0, index_of(n.lo) - i - 1);
    }
    std::sort(out.begin(), out.end(), [](const LeafInfo& a, const LeafInfo& b) { return a.value < b.value; });
    return out;
  }

  std::vector<LeafInfo> leaves(const ScaledAdd& f) const { return leaves(f.root); }

  double max_abs_leaf(NodeRef root) const {
    double m = 0.0;
    for (NodeRef r : visit(root))
      if (nodes_[r].is_leaf()) m = std::max(m, std::fabs(nodes_[r].value));
    return m;
  }

  /// Value of the unscaled diagram at a full assignment indexed by VarId.
  double evaluate_root(NodeRef r, const std::vector<std::uint8_t>& assignment) const {
    while (!nodes_[r].is_leaf()) {
      const AddNode& n = nodes_[r];
      r = assignment[order_[n.level]] ? n.hi : n.lo;
    }
    return nodes_[r].value;
  }

  double evaluate(const ScaledAdd& f, const std::vector<std::uint8_t>& assignment) const {
    return std::exp(f.log_scale) * evaluate_root(f.root, assignment);
  }

  // -------------------------------------------------------- leaf mapping

  /// Rebuilds the diagram with each leaf value replaced by fn(ref, value).
  template <typename Fn>
  NodeRef map_leaves(NodeRef root, Fn&& fn) {
    // Bottom-up over the level-sorted node list; children sit after parents.
    const std::vector<NodeRef> nodes = reachable(root);
    if (slot_.size() < nodes_.size()) slot_.resize(nodes_.size());
    for (std::uint32_t i = 0; i < nodes.size(); ++i) slot_[nodes[i]] = i;
    std::vector<NodeRef> out(nodes.size());
    for (std::size_t i = nodes.size(); i-- > 0;) {
      const AddNode n = nodes_[nodes[i]];
      out[i] = n.is_leaf() ? leaf(fn(nodes[i], n.value)) : make_node(n.level, out[slot_[n.hi]], out[slot_[n.lo]]);
    }
    return out[0];
  }

  /// Leaf relabelling through an explicit table; unlisted leaves keep their value.
  NodeRef relabel(NodeRef root, const std::unordered_map<NodeRef, double>& remap) {
    return map_leaves(root, [&](NodeRef r, double x) {
      auto it = remap.find(r);
      return it == remap.end() ? x : it->second;
    });
  }

  /// Node count relabel() would produce, computed without touching the pool.
  std::size_t relabeled_size(NodeRef root, const std::unordered_map<NodeRef, double>& remap) const {
    std::unordered_map<NodeRef, std::uint32_t> memo;
    std::unordered_map<detail::NodeKey, std::uint32_t, detail::NodeKeyHash> local_unique;
    std::unordered_map<std::uint64_t, std::uint32_t> local_leaves;
    std::uint32_t next = 0;
    std::function<std::uint32_t(NodeRef)> rec = [&](NodeRef r) -> std::uint32_t {
      if (auto it = memo.find(r); it != memo.end()) return it->second;
      const AddNode& n = nodes_[r];
      std::uint32_t id;
      if (n.is_leaf()) {
        auto it = remap.find(r);
        double v = it == remap.end() ? n.value : it->second;
        auto [pos, fresh] = local_leaves.emplace(detail::value_bits(v), next);
        if (fresh) ++next;
        id = pos->second;
      } else {
        std::uint32_t h = rec(n.hi);
        std::uint32_t l = rec(n.lo);
        if (h == l) {
          id = h;
        } else {
          auto [pos, fresh] = local_unique.emplace(detail::NodeKey{n.level, h, l}, next);
          if (fresh) ++next;
          id = pos->second;
        }
      }
      memo.emplace(r, id);
      return id;
    };
    rec(root);
    return next;
  }

  /// Rescales so that max |leaf| == 1 exactly (or returns the zero function).
  ScaledAdd normalize(NodeRef root, double log_scale) {
    double m = max_abs_leaf(root);
    if (m == 0.0) return zero();
    if (m == 1.0) return {root, log_scale};
    NodeRef r = map_leaves(root, [m](NodeRef, double x) { return x / m; });
    return {r, log_scale + std::log(m)};
  }

  // ------------------------------------------------- memory management

  void clear_caches() { invalidate_cache(); }

  /// True once enough nodes have been allocated since the last collection
  /// that a sweep is worthwhile.
  bool should_collect() const {
    return allocated_since_gc_ > std::max<std::size_t>(1u << 16, live_after_gc_);
  }

  /// Frees every node not reachable from `roots`. Refs of surviving nodes are
  /// unchanged; freed slots are recycled. Clears the apply cache.
  void collect(std::span<const NodeRef> roots) {
    std::vector<char> mark(nodes_.size(), 0);
    std::vector<NodeRef> stack(roots.begin(), roots.end());
    while (!stack.empty()) {
      NodeRef r = stack.back();
      stack.pop_back();
      if (mark[r]) continue;
      mark[r] = 1;
      if (!nodes_[r].is_leaf()) {
        stack.push_back(nodes_[r].hi);
        stack.push_back(nodes_[r].lo);
      }
    }
    for (NodeRef r = 0; r < nodes_.size(); ++r) {
      AddNode& n = nodes_[r];
      if (mark[r] || n.level == kFreeLevel) continue;
      if (n.is_leaf())
        leaf_table_.erase(detail::value_bits(n.value));
      else
        unique_.erase(detail::NodeKey{n.level, n.hi, n.lo});
      n.level = kFreeLevel;
      free_.push_back(r);
      --live_;
    }
    invalidate_cache();
    allocated_since_gc_ = 0;
    live_after_gc_ = live_;
  }

  void collect(std::span<const ScaledAdd> roots) {
    std::vector<NodeRef> refs;
    refs.reserve(roots.size());
    for (const auto& f : roots) refs.push_back(f.root);
    collect(std::span<const NodeRef>(refs));
  }

  // --------------------------------------------------------------- debug

  /// Graphviz rendering: solid edges for the true branch, dashed for false.
  std::string to_dot(const ScaledAdd& f) const {
    std::ostringstream out;
    out.precision(12);
    out << "digraph ADD {\n  label=\"log_scale=" << f.log_scale << "\";\n";
    auto nodes = reachable(f.root);
    for (NodeRef r : nodes) {
      const AddNode& n = nodes_[r];
      if (n.is_leaf())
        out << "  n" << r << " [shape=box,label=\"" << n.value << "\"];\n";
      else
        out << "  n" << r << " [shape=circle,label=\"x" << order_[n.level] << "\"];\n";
    }
    for (NodeRef r : nodes) {
      const AddNode& n = nodes_[r];
      if (n.is_leaf()) continue;
      out << "  n" << r << " -> n" << n.hi << " [style=solid];\n";
      out << "  n" << r << " -> n" << n.lo << " [style=dashed];\n";
    }
    out << "}\n";
    return out.str();
  }

 private:
  NodeRef allocate(const AddNode& n) {
    if (live_ >= max_nodes_) throw Error(ErrorKind::OutOfBudget, "ADD node pool is full (" + std::to_string(live_) + " nodes)");
    ++live_;
    ++allocated_since_gc_;
    if (!free_.empty()) {
      NodeRef r = free_.back();
      free_.pop_back();
      nodes_[r] = n;
      return r;
    }
    if (nodes_.size() >= kFreeLevel) throw Error(ErrorKind::OutOfBudget, "node references exhausted");
    nodes_.push_back(n);
    return static_cast<NodeRef>(nodes_.size() - 1);
  }

  template <typename Fn>
  NodeRef map_leaves(NodeRef root, Fn&& fn, std::unordered_map<NodeRef, NodeRef>& memo) {
    std::function<NodeRef(NodeRef)> rec = [&](NodeRef r) -> NodeRef {
      if (auto it = memo.find(r); it != memo.end()) return it->second;
      AddNode n = nodes_[r];
      NodeRef out = n.is_leaf() ? leaf(fn(r, n.value)) : make_node(n.level, rec(n.hi), rec(n.lo));
      memo.emplace(r, out);
      return out;
    };
    return rec(root);
  }

  NodeRef rescale(NodeRef root, double log_factor) {
    if (log_factor == 0.0) return root;
    double factor = std::exp(log_factor);
    return map_leaves(root, [factor](NodeRef, double x) { return x * factor; });
  }

  static double combine(AddOp op, double x, double y) {
    switch (op) {
      case AddOp::Multiply: return x * y;
      case AddOp::Add: return x + y;
      case AddOp::Subtract: return x - y;
      case AddOp::Divide:
        if (y == 0.0) {
          if (x == 0.0) return 0.0;
          throw Error(ErrorKind::DivisionByZero, "nonzero value divided by zero");
        }
        return x / y;
      case AddOp::Max: return std::max(x, y);
      case AddOp::Min: return std::min(x, y);
    }
    return 0.0;
  }

  NodeRef apply_rec(AddOp op, NodeRef f, NodeRef g) {
    const AddNode a = nodes_[f];
    const AddNode b = nodes_[g];
    if (a.is_leaf() && b.is_leaf()) return leaf(combine(op, a.value, b.value));
    switch (op) {
      case AddOp::Multiply:
        if ((a.is_leaf() && a.value == 0.0) || (b.is_leaf() && b.value == 0.0)) return zero_leaf();
        if (a.is_leaf() && a.value == 1.0) return g;
        if (b.is_leaf() && b.value == 1.0) return f;
        break;
      case AddOp::Add:
        if (a.is_leaf() && a.value == 0.0) return g;
        if (b.is_leaf() && b.value == 0.0) return f;
        break;
      case AddOp::Subtract:
        if (f == g) return zero_leaf();
        if (b.is_leaf() && b.value == 0.0) return f;
        break;
      case AddOp::Divide:
        if (a.is_leaf() && a.value == 0.0) return zero_leaf();
        if (b.is_leaf() && b.value == 1.0) return f;
        break;
      case AddOp::Max:
      case AddOp::Min:
        if (f == g) return f;
        break;
    }
    if (detail::commutative(op) && f > g) return apply_rec(op, g, f);

    detail::ApplyKey key{op, f, g};
    const std::size_t h = detail::ApplyKeyHash{}(key);
    if (const ApplyEntry* e = cache_probe(h); e && e->gen == cache_gen_ && e->key == key) return e->result;

    std::uint32_t level = std::min(a.level, b.level);
    NodeRef f_hi = a.level == level ? a.hi : f;
    NodeRef f_lo = a.level == level ? a.lo : f;
    NodeRef g_hi = b.level == level ? b.hi : g;
    NodeRef g_lo = b.level == level ? b.lo : g;
    NodeRef hi = apply_rec(op, f_hi, g_hi);
    NodeRef lo = apply_rec(op, f_lo, g_lo);
    NodeRef out = make_node(level, hi, lo);
    cache_store(h, key, out);
    return out;
  }

  // Computed table: direct-mapped and lossy, sized to the live pool. A miss
  // only costs recomputation; hash-consing makes the result the same.
  struct ApplyEntry {
    detail::ApplyKey key{};
    NodeRef result = 0;
    std::uint32_t gen = 0;
  };
  static constexpr std::size_t kMinCache = std::size_t{1} << 12;
  static constexpr std::size_t kMaxCache = std::size_t{1} << 20;

  const ApplyEntry* cache_probe(std::size_t h) const {
    return apply_cache_.empty() ? nullptr : &apply_cache_[h & (apply_cache_.size() - 1)];
  }

  void cache_store(std::size_t h, const detail::ApplyKey& key, NodeRef out) {
    const std::size_t want = std::clamp(std::bit_ceil(live_), kMinCache, kMaxCache);
    if (apply_cache_.size() < want) apply_cache_.assign(want, ApplyEntry{});
    apply_cache_[h & (apply_cache_.size() - 1)] = {key, out, cache_gen_};
  }

  // Nodes under `root` in DFS order.
  std::vector<NodeRef> visit(NodeRef root) const {
    std::vector<NodeRef> out;
    if (mark_.size() < nodes_.size()) mark_.resize(nodes_.size(), 0);
    if (++epoch_ == 0) {
      std::fill(mark_.begin(), mark_.end(), 0);
      epoch_ = 1;
    }
    std::vector<NodeRef> stack{root};
    while (!stack.empty()) {
      NodeRef r = stack.back();
      stack.pop_back();
      if (mark_[r] == epoch_) continue;
      mark_[r] = epoch_;
      out.push_back(r);
      const AddNode& n = nodes_[r];
      if (!n.is_leaf()) {
        stack.push_back(n.hi);
        stack.push_back(n.lo);
      }
    }
    return out;
  }

  void invalidate_cache() {
    if (++cache_gen_ == 0) {
      std::fill(apply_cache_.begin(), apply_cache_.end(), ApplyEntry{});
      cache_gen_ = 1;
    }
  }

  std::vector<VarId> order_;
  std::vector<std::uint32_t> level_of_;
  std::vector<AddNode> nodes_;
  std::vector<NodeRef> free_;
  // Pooled so that hash-table node churn bypasses malloc. Heap-held so a
  // moved store keeps the resource its tables point to.
  std::unique_ptr<std::pmr::unsynchronized_pool_resource> table_pool_ =
      std::make_unique<std::pmr::unsynchronized_pool_resource>();
  std::pmr::unordered_map<detail::NodeKey, NodeRef, detail::NodeKeyHash> unique_{table_pool_.get()};
  std::pmr::unordered_map<std::uint64_t, NodeRef> leaf_table_{table_pool_.get()};
  std::vector<ApplyEntry> apply_cache_;
  std::uint32_t cache_gen_ = 1;
  std::size_t max_nodes_;
  // Visit marks for reachable(); a fresh epoch per traversal.
  mutable std::vector<std::uint32_t> mark_;
  mutable std::uint32_t epoch_ = 0;
  // Position of each node in the current leaves()/map_leaves() traversal.
  mutable std::vector<std::uint32_t> slot_;
  std::size_t live_ = 0;
  std::size_t allocated_since_gc_ = 0;
  std::size_t live_after_gc_ = 0;
};

}  // namespace quantal
