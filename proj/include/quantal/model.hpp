#pragma once

// Markov networks over binary variables: the data model, the UAI MARKOV text
// format, evidence conditioning, the primal graph and the Ising generator.

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "quantal/error.hpp"

namespace quantal {

using VarId = std::uint32_t;

/// (P(X=0), P(X=1)).
using Marginal = std::array<double, 2>;
using Marginals = std::vector<Marginal>;

/// A nonnegative table over an ordered scope. Row-major, last scope variable
/// varies fastest (the UAI layout).
struct Potential {
  std::vector<VarId> scope;
  std::vector<double> table;

  std::size_t index_of(const std::vector<std::uint8_t>& assignment) const {
    std::size_t idx = 0;
    for (VarId v : scope) idx = (idx << 1) | (assignment[v] & 1u);
    return idx;
  }

  /// Value at a full assignment indexed by variable id.
  double value(const std::vector<std::uint8_t>& assignment) const {
    return table[index_of(assignment)];
  }

  bool operator==(const Potential&) const = default;
};

struct Evidence {
  std::map<VarId, std::uint8_t> assignments;

  bool empty() const { return assignments.empty(); }
  bool operator==(const Evidence&) const = default;
};

struct MarkovNet {
  std::size_t num_vars = 0;
  std::vector<int> cardinalities;
  std::vector<Potential> potentials;
  /// Variables already conditioned on. They appear in no potential and are
  /// not summed over.
  Evidence evidence;

  bool is_free(VarId v) const { return !evidence.assignments.contains(v); }

  std::vector<VarId> free_variables() const {
    std::vector<VarId> out;
    for (VarId v = 0; v < num_vars; ++v)
      if (is_free(v)) out.push_back(v);
    return out;
  }

  /// Throws if any invariant of the data model is broken.
  void validate() const {
    if (cardinalities.size() != num_vars)
      throw Error(ErrorKind::SyntaxError, "cardinality count does not match variable count");
    for (int c : cardinalities)
      if (c != 2) throw Error(ErrorKind::UnsupportedArity, "cardinality " + std::to_string(c));
    for (const auto& p : potentials) {
      std::vector<VarId> sorted = p.scope;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw Error(ErrorKind::SyntaxError, "duplicate variable in scope");
      for (VarId v : p.scope)
        if (v >= num_vars) throw Error(ErrorKind::SyntaxError, "scope variable out of range");
      if (p.scope.size() >= 63 || p.table.size() != (std::size_t{1} << p.scope.size()))
        throw Error(ErrorKind::SyntaxError, "table size does not match scope");
      for (double x : p.table) {
        if (!std::isfinite(x)) throw Error(ErrorKind::SyntaxError, "non-finite table entry");
        if (x < 0) throw Error(ErrorKind::NegativeValue, "negative table entry");
      }
    }
  }

  bool operator==(const MarkovNet&) const = default;
};

namespace detail {

class TokenReader {
 public:
  explicit TokenReader(std::istream& in) {
    std::string line;
    while (std::getline(in, line)) {
      auto first = line.find_first_not_of(" \t\r");
      if (first != std::string::npos && line[first] == '#') continue;
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) tokens_.push_back(std::move(tok));
    }
  }

  bool done() const { return pos_ >= tokens_.size(); }

  const std::string& next(const char* what) {
    if (done()) throw Error(ErrorKind::SyntaxError, std::string("unexpected end of input, expected ") + what);
    return tokens_[pos_++];
  }

  long long integer(const char* what) {
    const std::string& tok = next(what);
    char* end = nullptr;
    errno = 0;
    long long v = std::strtoll(tok.c_str(), &end, 10);
    if (errno != 0 || end != tok.c_str() + tok.size())
      throw Error(ErrorKind::SyntaxError, std::string("bad integer '") + tok + "' for " + what);
    return v;
  }

  double real(const char* what) {
    const std::string& tok = next(what);
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || std::isnan(v))
      throw Error(ErrorKind::SyntaxError, std::string("bad real '") + tok + "' for " + what);
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Reads the UAI MARKOV format. Lines starting with '#' are comments.
inline MarkovNet parse_uai(std::istream& in) {
  detail::TokenReader r(in);
  if (r.next("header") != "MARKOV") throw Error(ErrorKind::SyntaxError, "expected MARKOV header");
  MarkovNet net;
  long long n = r.integer("variable count");
  if (n < 0) throw Error(ErrorKind::SyntaxError, "negative variable count");
  net.num_vars = static_cast<std::size_t>(n);
  for (long long i = 0; i < n; ++i) {
    long long c = r.integer("cardinality");
    if (c <= 0) throw Error(ErrorKind::SyntaxError, "non-positive cardinality");
    if (c != 2) throw Error(ErrorKind::UnsupportedArity, "variable " + std::to_string(i) + " has cardinality " + std::to_string(c));
    net.cardinalities.push_back(2);
  }
  long long m = r.integer("potential count");
  if (m < 0) throw Error(ErrorKind::SyntaxError, "negative potential count");
  net.potentials.resize(static_cast<std::size_t>(m));
  for (auto& p : net.potentials) {
    long long s = r.integer("scope size");
    if (s < 0 || s > 62) throw Error(ErrorKind::SyntaxError, "bad scope size");
    for (long long j = 0; j < s; ++j) {
      long long v = r.integer("scope variable");
      if (v < 0 || v >= n) throw Error(ErrorKind::SyntaxError, "scope variable " + std::to_string(v) + " out of range");
      p.scope.push_back(static_cast<VarId>(v));
    }
  }
  for (auto& p : net.potentials) {
    long long count = r.integer("entry count");
    if (count < 0 || static_cast<std::size_t>(count) != (std::size_t{1} << p.scope.size()))
      throw Error(ErrorKind::SyntaxError, "entry count " + std::to_string(count) + " does not match scope");
    p.table.reserve(static_cast<std::size_t>(count));
    for (long long j = 0; j < count; ++j) {
      double x = r.real("table entry");
      if (x < 0) throw Error(ErrorKind::NegativeValue, "negative table entry " + std::to_string(x));
      if (!std::isfinite(x)) throw Error(ErrorKind::SyntaxError, "non-finite table entry");
      p.table.push_back(x);
    }
  }
  if (!r.done()) throw Error(ErrorKind::SyntaxError, "trailing tokens after last table");
  net.validate();
  return net;
}

inline MarkovNet parse_uai(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_uai(in);
}

inline MarkovNet read_uai_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::SyntaxError, "cannot open " + path);
  return parse_uai(in);
}

/// Writes the network in UAI MARKOV format with round-trip exact decimals.
/// Evidence is not part of the format and is dropped.
inline std::string serialize_uai(const MarkovNet& net) {
  std::ostringstream out;
  out << "MARKOV\n" << net.num_vars << "\n";
  for (std::size_t i = 0; i < net.num_vars; ++i) out << (i ? " " : "") << 2;
  out << "\n" << net.potentials.size() << "\n";
  for (const auto& p : net.potentials) {
    out << p.scope.size();
    for (VarId v : p.scope) out << ' ' << v;
    out << "\n";
  }
  out << std::setprecision(17);
  for (const auto& p : net.potentials) {
    out << "\n" << p.table.size() << "\n";
    for (std::size_t j = 0; j < p.table.size(); ++j) out << (j ? " " : "") << p.table[j];
    out << "\n";
  }
  return out.str();
}

/// Evidence sidecar: a count followed by that many `var value` pairs.
inline Evidence parse_evidence(std::istream& in, std::size_t num_vars) {
  detail::TokenReader r(in);
  Evidence ev;
  if (r.done()) return ev;
  long long e = r.integer("evidence count");
  if (e < 0) throw Error(ErrorKind::SyntaxError, "negative evidence count");
  for (long long i = 0; i < e; ++i) {
    long long v = r.integer("evidence variable");
    long long val = r.integer("evidence value");
    if (v < 0 || static_cast<std::size_t>(v) >= num_vars)
      throw Error(ErrorKind::UnknownVariable, "evidence on variable " + std::to_string(v));
    if (val != 0 && val != 1) throw Error(ErrorKind::SyntaxError, "evidence value must be 0 or 1");
    if (!ev.assignments.emplace(static_cast<VarId>(v), static_cast<std::uint8_t>(val)).second)
      throw Error(ErrorKind::SyntaxError, "variable " + std::to_string(v) + " assigned twice");
  }
  if (!r.done()) throw Error(ErrorKind::SyntaxError, "trailing tokens in evidence");
  return ev;
}

inline Evidence read_evidence_file(const std::string& path, std::size_t num_vars) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::SyntaxError, "cannot open " + path);
  return parse_evidence(in, num_vars);
}

/// Restricts every potential to the evidence. The partition function of the
/// result is the unnormalized probability of the evidence.
inline MarkovNet apply_evidence(const MarkovNet& net, const Evidence& ev) {
  for (const auto& [v, val] : ev.assignments) {
    if (v >= net.num_vars) throw Error(ErrorKind::UnknownVariable, "evidence on variable " + std::to_string(v));
    if (val > 1) throw Error(ErrorKind::BadParameter, "evidence value must be 0 or 1");
    auto it = net.evidence.assignments.find(v);
    if (it != net.evidence.assignments.end() && it->second != val)
      throw Error(ErrorKind::BadParameter, "conflicting evidence on variable " + std::to_string(v));
  }
  if (ev.empty()) return net;

  MarkovNet out = net;
  for (const auto& [v, val] : ev.assignments) out.evidence.assignments[v] = val;
  for (auto& p : out.potentials) {
    std::vector<VarId> kept;
    std::size_t fixed_bits = 0;  // contribution of evidenced positions to the source index
    std::vector<std::size_t> kept_shift;
    const std::size_t s = p.scope.size();
    for (std::size_t i = 0; i < s; ++i) {
      std::size_t shift = s - 1 - i;
      auto it = ev.assignments.find(p.scope[i]);
      if (it == ev.assignments.end()) {
        kept.push_back(p.scope[i]);
        kept_shift.push_back(shift);
      } else if (it->second) {
        fixed_bits |= std::size_t{1} << shift;
      }
    }
    if (kept.size() == s) continue;
    std::vector<double> table(std::size_t{1} << kept.size());
    for (std::size_t j = 0; j < table.size(); ++j) {
      std::size_t src = fixed_bits;
      for (std::size_t i = 0; i < kept.size(); ++i)
        if ((j >> (kept.size() - 1 - i)) & 1u) src |= std::size_t{1} << kept_shift[i];
      table[j] = p.table[src];
    }
    p.scope = std::move(kept);
    p.table = std::move(table);
  }
  return out;
}

/// Undirected graph over variable ids; adjacency lists are sorted.
struct Graph {
  std::vector<std::vector<VarId>> adjacency;

  std::size_t num_vertices() const { return adjacency.size(); }

  std::size_t num_edges() const {
    std::size_t twice = 0;
    for (const auto& a : adjacency) twice += a.size();
    return twice / 2;
  }

  bool adjacent(VarId u, VarId v) const {
    const auto& a = adjacency[u];
    return std::binary_search(a.begin(), a.end(), v);
  }
};

/// Variables are adjacent iff they share a potential scope.
inline Graph primal_graph(const MarkovNet& net) {
  Graph g;
  g.adjacency.resize(net.num_vars);
  for (const auto& p : net.potentials)
    for (VarId u : p.scope)
      for (VarId v : p.scope)
        if (u != v) g.adjacency[u].push_back(v);
  for (auto& a : g.adjacency) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return g;
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw. Together
/// with std::mt19937_64 (whose output sequence the standard fixes) this is
/// reproducible across platforms, unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline constexpr double kIsingGammaFloor = 1e-6;

/// n x n Ising grid. Variable (r, c) has id r*n + c. Potentials are the n*n
/// node potentials (gamma, 1/gamma) in id order, then for each cell in
/// row-major order its right edge and then its down edge. Draw order matches
/// potential order; an edge draws theta then its mirror bit.
inline MarkovNet gen_ising(std::size_t n, double beta, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorKind::BadParameter, "grid side must be >= 1");
  if (!(beta > 1.0) || !std::isfinite(beta)) throw Error(ErrorKind::BadParameter, "beta must be > 1");
  std::mt19937_64 gen(seed);
  MarkovNet net;
  net.num_vars = n * n;
  net.cardinalities.assign(net.num_vars, 2);
  for (std::size_t v = 0; v < n * n; ++v) {
    double gamma = std::clamp(uniform01(gen), kIsingGammaFloor, 1.0);
    net.potentials.push_back({{static_cast<VarId>(v)}, {gamma, 1.0 / gamma}});
  }
  auto edge = [&](std::size_t a, std::size_t b) {
    double theta = 1.0 + (beta - 1.0) * uniform01(gen);
    bool mirror = (gen() >> 63) != 0;
    Potential p{{static_cast<VarId>(a), static_cast<VarId>(b)}, {}};
    if (mirror)
      p.table = {1.0 / theta, theta, theta, 1.0 / theta};
    else
      p.table = {theta, 1.0 / theta, 1.0 / theta, theta};
    net.potentials.push_back(std::move(p));
  };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      if (c + 1 < n) edge(r * n + c, r * n + c + 1);
      if (r + 1 < n) edge(r * n + c, (r + 1) * n + c);
    }
  return net;
}

}  // namespace quantal
