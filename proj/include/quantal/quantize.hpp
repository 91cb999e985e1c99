#pragma once

// Leaf quantization: shrink an ADD below a node budget by mapping several
// leaf values to one representative. Two heuristics are provided:
//
//  * min-error: pick the number of clusters l by binary search and, for each
//    l, use the error-optimal contiguous partition of the sorted leaf values;
//  * min-merge: repeatedly merge a leaf into the leaf sharing the most parent
//    nodes with it, so the parents become redundant and vanish on reduction.
//
// MinErrorMerge runs both and keeps the smaller error. In Upper (Lower) mode
// every representative is its cluster's max (min), so the quantized function
// dominates (is dominated by) the input pointwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "quantal/add.hpp"
#include "quantal/error.hpp"

namespace quantal {

enum class Heuristic { MinError, MinMerge, MinErrorMerge };
enum class BoundMode { Approx, Upper, Lower };
enum class ErrorMeasure { WeightedSquaredError, WeightedKL };

struct QuantizeConfig {
  Heuristic heuristic = Heuristic::MinErrorMerge;
  BoundMode mode = BoundMode::Upper;
  std::size_t node_budget = 2;
  ErrorMeasure measure = ErrorMeasure::WeightedSquaredError;
};

struct WeightedValue {
  double value;
  double mass;
};

/// Contiguous clusters over sorted values. Cluster c covers indices
/// [starts[c], starts[c+1]) (the last one runs to the end).
struct QuantizationMap {
  std::vector<std::size_t> starts;
  std::vector<double> representatives;
  double error = 0.0;

  std::size_t num_clusters() const { return starts.size(); }

  std::size_t cluster_of(std::size_t index) const {
    auto it = std::upper_bound(starts.begin(), starts.end(), index);
    return static_cast<std::size_t>(it - starts.begin()) - 1;
  }
};

/// Per-value contribution to the error measure D. The KL form is the
/// generalized (unnormalized) divergence w ln(w/r) - w + r, which is >= 0 for
/// every representative and sums to the plain KL term when r is the
/// mass-weighted mean.
inline double point_cost(double w, double rep, ErrorMeasure measure) {
  if (measure == ErrorMeasure::WeightedSquaredError) return (w - rep) * (w - rep);
  if (rep == 0.0) return w == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  double wlogw = w == 0.0 ? 0.0 : w * std::log(w / rep);
  return std::max(0.0, wlogw - w + rep);
}

/// O(1) cluster cost from prefix sums.
class ClusterCost {
 public:
  ClusterCost(std::span<const WeightedValue> values, ErrorMeasure measure, BoundMode mode)
      : values_(values.begin(), values.end()), measure_(measure), mode_(mode) {
    const std::size_t t = values_.size();
    m_.assign(t + 1, 0.0);
    s1_.assign(t + 1, 0.0);
    s2_.assign(t + 1, 0.0);
    sl_.assign(t + 1, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
      const double w = values_[i].value;
      const double m = values_[i].mass;
      m_[i + 1] = m_[i] + m;
      s1_[i + 1] = s1_[i] + m * w;
      s2_[i + 1] = s2_[i] + m * w * w;
      sl_[i + 1] = sl_[i] + (w == 0.0 ? 0.0 : m * w * std::log(w));
      logs_.push_back(w == 0.0 ? 0.0 : std::log(w));
    }
  }

  std::size_t size() const { return values_.size(); }

  /// Representative of cluster [i, j] (inclusive).
  double representative(std::size_t i, std::size_t j) const {
    switch (mode_) {
      case BoundMode::Upper: return values_[j].value;
      case BoundMode::Lower: return values_[i].value;
      case BoundMode::Approx: break;
    }
    double mean = (s1_[j + 1] - s1_[i]) / (m_[j + 1] - m_[i]);
    return std::clamp(mean, values_[i].value, values_[j].value);
  }

  double cost(std::size_t i, std::size_t j) const {
    switch (measure_) {
      case ErrorMeasure::WeightedSquaredError:
        switch (mode_) {
          case BoundMode::Approx: return cost_as<ErrorMeasure::WeightedSquaredError, BoundMode::Approx>(i, j);
          case BoundMode::Upper: return cost_as<ErrorMeasure::WeightedSquaredError, BoundMode::Upper>(i, j);
          case BoundMode::Lower: return cost_as<ErrorMeasure::WeightedSquaredError, BoundMode::Lower>(i, j);
        }
        break;
      case ErrorMeasure::WeightedKL:
        switch (mode_) {
          case BoundMode::Approx: return cost_as<ErrorMeasure::WeightedKL, BoundMode::Approx>(i, j);
          case BoundMode::Upper: return cost_as<ErrorMeasure::WeightedKL, BoundMode::Upper>(i, j);
          case BoundMode::Lower: return cost_as<ErrorMeasure::WeightedKL, BoundMode::Lower>(i, j);
        }
        break;
    }
    return 0.0;
  }

  ErrorMeasure measure() const { return measure_; }
  BoundMode mode() const { return mode_; }

  template <ErrorMeasure E, BoundMode B>
  double cost_as(std::size_t i, std::size_t j) const {
    if (B != BoundMode::Approx && i == j) return 0.0;
    const double m = m_[j + 1] - m_[i];
    const double s1 = s1_[j + 1] - s1_[i];
    double c;
    if constexpr (E == ErrorMeasure::WeightedSquaredError) {
      const double s2 = s2_[j + 1] - s2_[i];
      if constexpr (B == BoundMode::Approx) {
        c = s2 - s1 * s1 / m;
      } else {
        const double r = values_[B == BoundMode::Upper ? j : i].value;
        c = s2 - 2.0 * r * s1 + r * r * m;
      }
    } else {
      const double r = B == BoundMode::Approx ? representative(i, j) : values_[B == BoundMode::Upper ? j : i].value;
      if (r == 0.0) return s1 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
      const double log_r = B == BoundMode::Approx ? std::log(r) : logs_[B == BoundMode::Upper ? j : i];
      c = (sl_[j + 1] - sl_[i]) - log_r * s1 - s1 + r * m;
    }
    return std::max(0.0, c);
  }

 private:
  std::vector<WeightedValue> values_;
  ErrorMeasure measure_;
  BoundMode mode_;
  std::vector<double> m_, s1_, s2_, sl_, logs_;
};

/// Interval dynamic program over contiguous partitions, all cluster counts up
/// to max_clusters. Exact mode scans every split (O(t^2 l)); Fast mode uses
/// divide and conquer per layer (O(l t log t)), which relies on monotone
/// optimal splits. Every cost here satisfies the quadrangle inequality: the
/// mean-representative costs are 1-D Bregman clustering costs, and for the
/// max/min representatives the inequality reduces to the cost growing as the
/// representative moves away from the values.
class PartitionTable {
 public:
  enum class Algorithm { Auto, Exact, Fast };

  PartitionTable(std::span<const WeightedValue> values, std::size_t max_clusters, ErrorMeasure measure,
                 BoundMode mode, Algorithm algorithm = Algorithm::Auto)
      : cost_(values, measure, mode) {
    const std::size_t t = values.size();
    if (max_clusters < 1 || max_clusters > t) throw Error(ErrorKind::BadTarget, "cluster count out of range");
    for (std::size_t i = 1; i < t; ++i)
      if (!(values[i - 1].value < values[i].value)) throw Error(ErrorKind::BadParameter, "values must be sorted and distinct");
    for (const auto& v : values)
      if (!(v.mass > 0)) throw Error(ErrorKind::BadParameter, "masses must be positive");
    if (algorithm == Algorithm::Auto)
      algorithm = static_cast<double>(t) * static_cast<double>(t) * static_cast<double>(max_clusters) <= 1e4
                      ? Algorithm::Exact
                      : Algorithm::Fast;

    algorithm_ = algorithm;
    max_clusters_ = max_clusters;
    best_.assign(1, std::vector<double>(t + 1, std::numeric_limits<double>::infinity()));
    split_.assign(1, std::vector<std::uint32_t>(t + 1, 0));
    best_[0][0] = 0.0;
  }

  std::size_t max_clusters() const { return max_clusters_; }

  double error(std::size_t clusters) {
    if (clusters < 1 || clusters > max_clusters()) throw Error(ErrorKind::BadTarget, "cluster count out of range");
    fill_to(clusters);
    return best_[clusters].back();
  }

  /// Layers are filled on first use; callers probing few cluster counts
  /// never pay for the rest.
  QuantizationMap extract(std::size_t clusters) {
    if (clusters < 1 || clusters > max_clusters()) throw Error(ErrorKind::BadTarget, "cluster count out of range");
    fill_to(clusters);
    QuantizationMap map;
    std::size_t j = cost_.size();
    for (std::size_t c = clusters; c >= 1; --c) {
      std::size_t i = split_[c][j];
      map.starts.push_back(i);
      map.representatives.push_back(cost_.representative(i, j - 1));
      j = i;
    }
    std::reverse(map.starts.begin(), map.starts.end());
    std::reverse(map.representatives.begin(), map.representatives.end());
    map.error = best_[clusters].back();
    return map;
  }

 private:
  void fill_to(std::size_t clusters) {
    if (filled_ >= clusters) return;
    using E = ErrorMeasure;
    using B = BoundMode;
    const bool wse = cost_.measure() == E::WeightedSquaredError;
    switch (cost_.mode()) {
      case B::Approx: return wse ? fill_as<E::WeightedSquaredError, B::Approx>(clusters) : fill_as<E::WeightedKL, B::Approx>(clusters);
      case B::Upper: return wse ? fill_as<E::WeightedSquaredError, B::Upper>(clusters) : fill_as<E::WeightedKL, B::Upper>(clusters);
      case B::Lower: return wse ? fill_as<E::WeightedSquaredError, B::Lower>(clusters) : fill_as<E::WeightedKL, B::Lower>(clusters);
    }
  }

  template <ErrorMeasure E, BoundMode B>
  void fill_as(std::size_t clusters) {
    const std::size_t t = cost_.size();
    for (; filled_ < clusters; ++filled_) {
      const std::size_t c = filled_ + 1;
      best_.emplace_back(t + 1, std::numeric_limits<double>::infinity());
      split_.emplace_back(t + 1, 0);
      if (algorithm_ == Algorithm::Exact) {
        for (std::size_t j = c; j <= t; ++j) solve_cell<E, B>(c, j, c - 1, j - 1);
      } else {
        divide_and_conquer<E, B>(c, c, t, c - 1, t - 1);
      }
    }
  }

  // best over split points i in [lo, hi] for prefix j with c clusters.
  template <ErrorMeasure E, BoundMode B>
  std::size_t solve_cell(std::size_t c, std::size_t j, std::size_t lo, std::size_t hi) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = lo;
    const std::vector<double>& prev_row = best_[c - 1];
    for (std::size_t i = lo; i <= hi; ++i) {
      double prev = prev_row[i];
      if (prev == std::numeric_limits<double>::infinity()) continue;
      double v = prev + cost_.template cost_as<E, B>(i, j - 1);
      if (v < best) {
        best = v;
        arg = i;
      }
    }
    best_[c][j] = best;
    split_[c][j] = static_cast<std::uint32_t>(arg);
    return arg;
  }

  template <ErrorMeasure E, BoundMode B>
  void divide_and_conquer(std::size_t c, std::size_t jlo, std::size_t jhi, std::size_t optlo, std::size_t opthi) {
    if (jlo > jhi) return;
    std::size_t mid = jlo + (jhi - jlo) / 2;
    std::size_t lo = std::max(optlo, c - 1);
    std::size_t hi = std::min(opthi, mid - 1);
    std::size_t arg = solve_cell<E, B>(c, mid, lo, std::max(lo, hi));
    if (mid > jlo) divide_and_conquer<E, B>(c, jlo, mid - 1, optlo, arg);
    divide_and_conquer<E, B>(c, mid + 1, jhi, arg, opthi);
  }

  ClusterCost cost_;
  Algorithm algorithm_ = Algorithm::Exact;
  std::size_t filled_ = 0;
  std::size_t max_clusters_ = 0;
  std::vector<std::vector<double>> best_;
  std::vector<std::vector<std::uint32_t>> split_;
};

/// Error-minimizing partition of sorted distinct values into exactly
/// `clusters` contiguous groups, by exhaustive interval DP.
inline QuantizationMap optimal_partition(std::span<const WeightedValue> values, std::size_t clusters,
                                         ErrorMeasure measure, BoundMode mode) {
  if (clusters < 1 || clusters > values.size()) throw Error(ErrorKind::BadTarget, "cluster count out of range");
  PartitionTable table(values, clusters, measure, mode, PartitionTable::Algorithm::Exact);
  return table.extract(clusters);
}

/// New value for every leaf (parallel to the sorted leaf list) plus the
/// resulting error and cluster count.
struct LeafQuantization {
  std::vector<double> values;
  std::size_t clusters = 0;
  double error = 0.0;
};

inline double quantization_error(std::span<const LeafInfo> leaves, std::span<const double> new_values,
                                 ErrorMeasure measure) {
  double d = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) d += leaves[i].mass * point_cost(leaves[i].value, new_values[i], measure);
  return d;
}

namespace detail {

inline std::unordered_map<NodeRef, double> leaf_remap(std::span<const LeafInfo> leaves, std::span<const double> values) {
  std::unordered_map<NodeRef, double> remap;
  for (std::size_t i = 0; i < leaves.size(); ++i)
    if (values[i] != leaves[i].value) remap.emplace(leaves[i].ref, values[i]);
  return remap;
}

inline bool has_zero_leaf(std::span<const LeafInfo> leaves) {
  return leaves.size() >= 2 && leaves.front().value == 0.0;
}

/// Node count of one diagram after relabeling its leaves, for many candidate
/// labelings. Same result as AddStore::relabeled_size, without per-call
/// hashing of the whole diagram.
class SizeProbe {
 public:
  SizeProbe(const AddStore& store, NodeRef root, std::span<const LeafInfo> leaves) {
    std::vector<NodeRef> nodes = store.reachable(root);
    std::reverse(nodes.begin(), nodes.end());  // leaves first, root last
    // (level, ref) keys, descending like `nodes`, for locating children.
    std::vector<std::uint64_t> keys(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) keys[i] = key_of(store, nodes[i]);
    auto pos = [&](NodeRef r) {
      return static_cast<std::uint32_t>(
          std::lower_bound(keys.begin(), keys.end(), key_of(store, r), std::greater<>()) - keys.begin());
    };
    std::vector<std::pair<NodeRef, std::uint32_t>> slot(leaves.size());
    for (std::uint32_t i = 0; i < leaves.size(); ++i) slot[i] = {leaves[i].ref, i};
    std::sort(slot.begin(), slot.end());
    for (NodeRef r : nodes) {
      const AddNode& n = store.node(r);
      if (n.is_leaf()) {
        auto it = std::lower_bound(slot.begin(), slot.end(), std::pair<NodeRef, std::uint32_t>{r, 0});
        if (it == slot.end() || it->first != r) throw std::out_of_range("leaf missing from leaf list");
        leaf_slot_.push_back(it->second);
        continue;
      }
      if (internal_.empty() || internal_.back().level != n.level) level_starts_.push_back(internal_.size());
      internal_.push_back({n.level, pos(n.hi), pos(n.lo)});
    }
    level_starts_.push_back(internal_.size());
  }

  std::size_t count(std::span<const double> values) const {
    const std::size_t nl = leaf_slot_.size();
    ids_.resize(nl + internal_.size());
    keyed_.clear();
    for (std::uint32_t i = 0; i < nl; ++i) keyed_.push_back({value_bits(values[leaf_slot_[i]]), 0, i});
    std::uint32_t next = assign(0, keyed_.size());
    for (std::size_t g = 0; g + 1 < level_starts_.size(); ++g) {
      keyed_.clear();
      for (std::size_t j = level_starts_[g]; j < level_starts_[g + 1]; ++j) {
        const std::uint32_t i = static_cast<std::uint32_t>(nl + j);
        const std::uint32_t h = ids_[internal_[j].hi], l = ids_[internal_[j].lo];
        if (h == l) ids_[i] = h;
        else keyed_.push_back({h, l, i});
      }
      next = assign(next, keyed_.size());
    }
    return next;
  }

 private:
  static std::uint64_t key_of(const AddStore& store, NodeRef r) {
    return (std::uint64_t{store.node(r).level} << 32) | r;
  }

  struct Internal {
    std::uint32_t level;
    std::uint32_t hi, lo;
  };
  struct Keyed {
    std::uint64_t a, b;
    std::uint32_t node;
  };

  // Equal (a, b) keys share one fresh id.
  std::uint32_t assign(std::uint32_t next, std::size_t n) const {
    std::sort(keyed_.begin(), keyed_.begin() + n,
              [](const Keyed& x, const Keyed& y) { return std::tie(x.a, x.b) < std::tie(y.a, y.b); });
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && (keyed_[i].a != keyed_[i - 1].a || keyed_[i].b != keyed_[i - 1].b)) ++next;
      ids_[keyed_[i].node] = next;
    }
    return n > 0 ? next + 1 : next;
  }

  std::vector<std::uint32_t> leaf_slot_;
  std::vector<Internal> internal_;
  std::vector<std::size_t> level_starts_;
  mutable std::vector<std::uint32_t> ids_;
  mutable std::vector<Keyed> keyed_;
};

/// Min-error search state: partition tables for the nonzero leaves (zero
/// kept apart) and, lazily, for all leaves.
class MinErrorSearch {
 public:
  MinErrorSearch(const SizeProbe& probe, std::span<const LeafInfo> leaves, const QuantizeConfig& cfg)
      : probe_(probe), leaves_(leaves), cfg_(cfg) {}

  /// Values for the largest feasible cluster count found by binary search.
  LeafQuantization run() {
    const std::size_t t = leaves_.size();
    const std::size_t k = cfg_.node_budget;
    if (has_zero_leaf(leaves_)) {
      // Zero stays its own cluster while that can meet the budget.
      std::vector<WeightedValue> nonzero;
      for (std::size_t i = 1; i < t; ++i) nonzero.push_back({leaves_[i].value, leaves_[i].mass});
      std::size_t cmax = std::min(nonzero.size(), std::max<std::size_t>(1, max_leaves(k) - 1));
      PartitionTable table(nonzero, cmax, cfg_.measure, cfg_.mode);
      auto values_for = [&](std::size_t c) {
        auto map = table.extract(c);
        std::vector<double> out(t);
        out[0] = 0.0;
        for (std::size_t i = 1; i < t; ++i) out[i] = map.representatives[map.cluster_of(i - 1)];
        return out;
      };
      if (auto found = search(cmax, values_for); found.clusters > 0) {
        found.clusters += 1;
        return found;
      }
    }
    std::vector<WeightedValue> all;
    for (const auto& l : leaves_) all.push_back({l.value, l.mass});
    std::size_t cmax = std::min(t, max_leaves(k));
    PartitionTable table(all, cmax, cfg_.measure, cfg_.mode);
    auto values_for = [&](std::size_t c) {
      auto map = table.extract(c);
      std::vector<double> out(t);
      for (std::size_t i = 0; i < t; ++i) out[i] = map.representatives[map.cluster_of(i)];
      return out;
    };
    return search(cmax, values_for);
  }

 private:
  // l distinct leaves need at least l - 1 internal nodes.
  static std::size_t max_leaves(std::size_t k) { return (k + 1) / 2; }

  template <typename ValuesFor>
  LeafQuantization search(std::size_t cmax, ValuesFor&& values_for) {
    auto feasible = [&](std::size_t c, std::vector<double>& out) {
      out = values_for(c);
      return probe_.count(out) <= cfg_.node_budget;
    };
    std::vector<double> best;
    if (!feasible(1, best)) return {};
    std::size_t lo = 1, hi = cmax;
    std::vector<double> trial;
    while (lo < hi) {
      std::size_t mid = (lo + hi + 1) / 2;
      if (feasible(mid, trial)) {
        lo = mid;
        best.swap(trial);
      } else {
        hi = mid - 1;
      }
    }
    LeafQuantization out;
    out.error = quantization_error(leaves_, best, cfg_.measure);
    out.values = std::move(best);
    out.clusters = lo;
    return out;
  }

  const SizeProbe& probe_;
  std::span<const LeafInfo> leaves_;
  const QuantizeConfig& cfg_;
};

inline double merged_value(double a, double b, BoundMode mode) {
  switch (mode) {
    case BoundMode::Upper: return std::max(a, b);
    case BoundMode::Lower: return std::min(a, b);
    case BoundMode::Approx: break;
  }
  return 0.5 * (a + b);
}

inline double relative_difference(double a, double b) {
  return std::fabs(a - b) / std::max({a, b, 1e-300});
}

/// Leaf/parent incidence of one diagram, reused across min-merge trials.
class MergeStructure {
 public:
  MergeStructure(const AddStore& store, NodeRef root, std::span<const LeafInfo> leaves) : leaves_(leaves) {
    std::vector<std::pair<NodeRef, std::uint32_t>> leaf_index(leaves.size());
    for (std::uint32_t i = 0; i < leaves.size(); ++i) leaf_index[i] = {leaves[i].ref, i};
    std::sort(leaf_index.begin(), leaf_index.end());
    auto find = [&](NodeRef r) -> std::int64_t {
      auto it = std::lower_bound(leaf_index.begin(), leaf_index.end(), std::pair<NodeRef, std::uint32_t>{r, 0});
      return it != leaf_index.end() && it->first == r ? std::int64_t{it->second} : std::int64_t{-1};
    };
    leaf_parents_.resize(leaves.size());
    for (NodeRef r : store.reachable(root)) {
      const AddNode& n = store.node(r);
      if (n.is_leaf()) continue;
      const std::int64_t h = find(n.hi), l = find(n.lo);
      if (h < 0 && l < 0) continue;
      std::uint32_t pid = static_cast<std::uint32_t>(parent_children_.size());
      parent_children_.push_back({h, l});
      if (h >= 0) leaf_parents_[h].push_back(pid);
      if (l >= 0) leaf_parents_[l].push_back(pid);
    }
  }

  struct Step {
    std::uint32_t winner;
    std::uint32_t loser;
    double value;
  };

  /// Sequentially merges down to `target` clusters and returns each leaf's
  /// final value.
  std::vector<double> merge_to(std::size_t target, BoundMode mode) const {
    auto steps = history(target, mode);
    return replay(steps, steps.size());
  }

  /// Leaf values after the first `count` steps of a merge history. Choices
  /// never depend on the target, so one history serves every cluster count.
  std::vector<double> replay(const std::vector<Step>& steps, std::size_t count) const {
    const std::size_t t = leaves_.size();
    std::vector<std::uint32_t> dsu(t);
    std::vector<double> value(t);
    for (std::uint32_t i = 0; i < t; ++i) {
      dsu[i] = i;
      value[i] = leaves_[i].value;
    }
    for (std::size_t s = 0; s < count; ++s) {
      dsu[steps[s].loser] = steps[s].winner;
      value[steps[s].winner] = steps[s].value;
    }
    std::vector<double> out(t);
    for (std::uint32_t i = 0; i < t; ++i) {
      std::uint32_t r = i;
      while (dsu[r] != r) r = dsu[r];
      out[i] = value[r];
    }
    return out;
  }

  std::vector<Step> history(std::size_t target, BoundMode mode) const {
    const std::size_t t = leaves_.size();
    std::vector<Step> steps;
    std::vector<std::uint32_t> dsu(t);
    for (std::uint32_t i = 0; i < t; ++i) dsu[i] = i;
    auto find = [&](std::uint32_t x) {
      while (dsu[x] != x) x = dsu[x] = dsu[dsu[x]];
      return x;
    };
    std::vector<double> value(t);
    // Sorted parent ids per cluster.
    std::vector<std::vector<std::uint32_t>> parents(t);
    for (std::size_t i = 0; i < t; ++i) {
      value[i] = leaves_[i].value;
      parents[i] = leaf_parents_[i];
    }
    const bool zero = has_zero_leaf(leaves_);
    // Nonzero clusters only; the zero cluster (index 0) is merged last.
    std::set<std::tuple<std::size_t, double, std::uint32_t>> selectable;
    std::set<std::pair<double, std::uint32_t>> by_value;
    for (std::uint32_t i = zero ? 1 : 0; i < t; ++i) {
      selectable.insert({parents[i].size(), value[i], i});
      by_value.insert({value[i], i});
    }

    auto unite = [&](std::uint32_t a, std::uint32_t b, bool b_tracked) {
      selectable.erase({parents[a].size(), value[a], a});
      by_value.erase({value[a], a});
      if (b_tracked) {
        selectable.erase({parents[b].size(), value[b], b});
        by_value.erase({value[b], b});
      }
      double v = merged_value(value[a], value[b], mode);
      if (parents[a].size() < parents[b].size()) std::swap(a, b);
      std::vector<std::uint32_t> joined;
      joined.reserve(parents[a].size() + parents[b].size());
      std::set_union(parents[a].begin(), parents[a].end(), parents[b].begin(), parents[b].end(),
                     std::back_inserter(joined));
      parents[a] = std::move(joined);
      parents[b] = {};
      dsu[b] = a;
      value[a] = v;
      steps.push_back({a, b, v});
      return a;
    };

    std::size_t clusters = t;
    std::unordered_map<std::uint32_t, std::size_t> shared;
    while (clusters > target) {
      if (by_value.size() < 2) {
        // Forced: fold the zero cluster into the last nonzero cluster.
        std::uint32_t a = by_value.begin()->second;
        unite(a, find(0), false);
        --clusters;
        continue;
      }
      auto [np, sv, sel] = *selectable.begin();
      (void)np;
      shared.clear();
      for (std::uint32_t p : parents[sel]) {
        for (std::int64_t child : {parent_children_[p].first, parent_children_[p].second}) {
          if (child < 0) continue;
          std::uint32_t c = find(static_cast<std::uint32_t>(child));
          if (c == sel || !by_value.contains({value[c], c})) continue;
          ++shared[c];
        }
      }
      std::uint32_t partner = sel;
      std::size_t best_count = 0;
      double best_rel = std::numeric_limits<double>::infinity();
      for (const auto& [c, count] : shared) {
        double rel = relative_difference(sv, value[c]);
        if (count > best_count || (count == best_count && (rel < best_rel || (rel == best_rel && c < partner)))) {
          best_count = count;
          best_rel = rel;
          partner = c;
        }
      }
      if (best_count == 0) {
        auto it = by_value.find({sv, sel});
        best_rel = std::numeric_limits<double>::infinity();
        if (it != by_value.begin()) {
          auto prev = std::prev(it);
          best_rel = relative_difference(sv, prev->first);
          partner = prev->second;
        }
        if (auto next = std::next(it); next != by_value.end()) {
          double rel = relative_difference(sv, next->first);
          if (rel < best_rel) partner = next->second;
        }
      }
      std::uint32_t merged = unite(sel, partner, true);
      selectable.insert({parents[merged].size(), value[merged], merged});
      by_value.insert({value[merged], merged});
      --clusters;
    }
    return steps;
  }

 private:
  std::span<const LeafInfo> leaves_;
  std::vector<std::pair<std::int64_t, std::int64_t>> parent_children_;
  std::vector<std::vector<std::uint32_t>> leaf_parents_;
};

}  // namespace detail

/// Contiguous error-optimal values for exactly `clusters` clusters, with the
/// zero leaf kept separate when `clusters` >= 2.
inline LeafQuantization min_error_values(std::span<const LeafInfo> leaves, std::size_t clusters, ErrorMeasure measure,
                                         BoundMode mode) {
  const std::size_t t = leaves.size();
  LeafQuantization out;
  out.values.resize(t);
  out.clusters = clusters;
  const bool zero = detail::has_zero_leaf(leaves) && clusters >= 2;
  const std::size_t first = zero ? 1 : 0;
  std::vector<WeightedValue> vals;
  for (std::size_t i = first; i < t; ++i) vals.push_back({leaves[i].value, leaves[i].mass});
  auto map = optimal_partition(vals, clusters - first, measure, mode);
  for (std::size_t i = first; i < t; ++i) out.values[i] = map.representatives[map.cluster_of(i - first)];
  out.error = quantization_error(leaves, out.values, measure);
  return out;
}

/// Min-merge values for exactly `clusters` clusters.
inline LeafQuantization min_merge_values(const AddStore& store, NodeRef root, std::span<const LeafInfo> leaves,
                                         std::size_t clusters, ErrorMeasure measure, BoundMode mode) {
  if (clusters < 1 || clusters > leaves.size()) throw Error(ErrorKind::BadTarget, "cluster count out of range");
  detail::MergeStructure structure(store, root, leaves);
  LeafQuantization out;
  out.values = structure.merge_to(clusters, mode);
  out.clusters = clusters;
  out.error = quantization_error(leaves, out.values, measure);
  return out;
}

namespace detail {

inline LeafQuantization min_error_plan(std::span<const LeafInfo> leaves, const QuantizeConfig& cfg,
                                       const SizeProbe& probe) {
  MinErrorSearch search(probe, leaves, cfg);
  return search.run();
}

inline LeafQuantization min_merge_plan(const AddStore& store, const ScaledAdd& f, std::span<const LeafInfo> leaves,
                                       const QuantizeConfig& cfg, const SizeProbe& probe) {
  MergeStructure structure(store, f.root, leaves);
  const std::size_t t = leaves.size();
  const auto steps = structure.history(1, cfg.mode);
  auto feasible = [&](std::size_t l, std::vector<double>& out) {
    out = structure.replay(steps, leaves.size() - l);
    return probe.count(out) <= cfg.node_budget;
  };
  // Binary search over l in [1, t-1]; the first probe is ceil(t/2).
  std::size_t lo = 1, hi = t > 1 ? t - 1 : 1;
  std::vector<double> best = structure.replay(steps, steps.size());
  std::vector<double> trial;
  while (lo < hi) {
    std::size_t mid = (lo + hi + 1) / 2;
    if (feasible(mid, trial)) {
      lo = mid;
      best.swap(trial);
    } else {
      hi = mid - 1;
    }
  }
  LeafQuantization out;
  out.error = quantization_error(leaves, best, cfg.measure);
  out.values = std::move(best);
  out.clusters = lo;
  return out;
}

inline ScaledAdd realize(AddStore& store, const ScaledAdd& f, std::span<const LeafInfo> leaves,
                         const LeafQuantization& plan) {
  NodeRef root = store.relabel(f.root, leaf_remap(leaves, plan.values));
  return store.normalize(root, f.log_scale);
}

}  // namespace detail

/// Min-error heuristic. Precondition: node_count(f) > cfg.node_budget.
inline ScaledAdd min_error_quantize(AddStore& store, const ScaledAdd& f, const QuantizeConfig& cfg) {
  auto leaves = store.leaves(f);
  return detail::realize(store, f, leaves, detail::min_error_plan(leaves, cfg, detail::SizeProbe(store, f.root, leaves)));
}

/// Min-merge heuristic. Precondition: node_count(f) > cfg.node_budget.
inline ScaledAdd min_merge_quantize(AddStore& store, const ScaledAdd& f, const QuantizeConfig& cfg) {
  auto leaves = store.leaves(f);
  return detail::realize(store, f, leaves, detail::min_merge_plan(store, f, leaves, cfg, detail::SizeProbe(store, f.root, leaves)));
}

/// Quantizes f until it has at most cfg.node_budget nodes; f itself when it
/// already fits.
inline ScaledAdd quantize_to_bound(AddStore& store, const ScaledAdd& f, const QuantizeConfig& cfg) {
  if (cfg.node_budget < 2) throw Error(ErrorKind::BadParameter, "node budget must be >= 2");
  if (store.node_count(f) <= cfg.node_budget) return f;
  auto leaves = store.leaves(f);
  const detail::SizeProbe probe(store, f.root, leaves);
  LeafQuantization plan;
  switch (cfg.heuristic) {
    case Heuristic::MinError:
      plan = detail::min_error_plan(leaves, cfg, probe);
      break;
    case Heuristic::MinMerge:
      plan = detail::min_merge_plan(store, f, leaves, cfg, probe);
      break;
    case Heuristic::MinErrorMerge: {
      plan = detail::min_error_plan(leaves, cfg, probe);
      auto merge = detail::min_merge_plan(store, f, leaves, cfg, probe);
      if (merge.error < plan.error) plan = std::move(merge);
      break;
    }
  }
  return detail::realize(store, f, leaves, plan);
}

inline const char* to_string(Heuristic h) {
  switch (h) {
    case Heuristic::MinError: return "min-error";
    case Heuristic::MinMerge: return "min-merge";
    case Heuristic::MinErrorMerge: return "min-error-merge";
  }
  return "?";
}

inline const char* to_string(BoundMode m) {
  switch (m) {
    case BoundMode::Approx: return "approx";
    case BoundMode::Upper: return "upper";
    case BoundMode::Lower: return "lower";
  }
  return "?";
}

}  // namespace quantal
