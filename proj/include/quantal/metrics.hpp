#pragma once

// Exhaustive reference computations and the evaluation measures: log-relative
// difference of bounds and average marginal KL divergence.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "quantal/error.hpp"
#include "quantal/model.hpp"

namespace quantal {

inline constexpr std::size_t kBruteForceMaxVars = 25;

struct BruteForceResult {
  double log_z = 0.0;
  Marginals marginals;
};

/// Sums the product of all potentials over every assignment of the free
/// variables. Evidence variables keep their observed value.
inline BruteForceResult brute_force(const MarkovNet& net) {
  const std::vector<VarId> free = net.free_variables();
  if (free.size() > kBruteForceMaxVars) throw Error(ErrorKind::TooLarge, "brute force is capped at 25 free variables");
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::vector<std::vector<double>> log_tables;
  for (const auto& p : net.potentials) {
    std::vector<double> lt(p.table.size());
    for (std::size_t i = 0; i < lt.size(); ++i) lt[i] = p.table[i] > 0 ? std::log(p.table[i]) : neg_inf;
    log_tables.push_back(std::move(lt));
  }
  std::vector<std::uint8_t> x(net.num_vars, 0);
  for (auto [v, val] : net.evidence.assignments)
    if (v < net.num_vars) x[v] = val;

  const std::uint64_t count = std::uint64_t{1} << free.size();
  auto weight = [&](std::uint64_t a) {
    for (std::size_t i = 0; i < free.size(); ++i) x[free[i]] = (a >> i) & 1u;
    double w = 0.0;
    for (std::size_t p = 0; p < net.potentials.size() && w != neg_inf; ++p)
      w += log_tables[p][net.potentials[p].index_of(x)];
    return w;
  };

  double max_w = neg_inf;
  for (std::uint64_t a = 0; a < count; ++a) max_w = std::max(max_w, weight(a));

  BruteForceResult out;
  out.marginals.assign(net.num_vars, Marginal{0.5, 0.5});
  for (auto [v, val] : net.evidence.assignments)
    if (v < net.num_vars) out.marginals[v] = val ? Marginal{0.0, 1.0} : Marginal{1.0, 0.0};
  if (max_w == neg_inf) {
    out.log_z = neg_inf;
    return out;
  }
  double total = 0.0;
  std::vector<double> ones(free.size(), 0.0);
  for (std::uint64_t a = 0; a < count; ++a) {
    double w = weight(a);
    if (w == neg_inf) continue;
    double e = std::exp(w - max_w);
    total += e;
    for (std::size_t i = 0; i < free.size(); ++i)
      if ((a >> i) & 1u) ones[i] += e;
  }
  out.log_z = max_w + std::log(total);
  for (std::size_t i = 0; i < free.size(); ++i) {
    double p1 = ones[i] / total;
    out.marginals[free[i]] = {1.0 - p1, p1};
  }
  return out;
}

/// (log U - log U_best) / log U_best on natural-log inputs.
inline double log_relative_diff(double log_u, double log_u_best) {
  if (std::fabs(log_u_best) <= 1e-12)
    throw Error(ErrorKind::DegenerateReference, "reference log bound is zero");
  return (log_u - log_u_best) / log_u_best;
}

/// KL(P_i || A_i) for one variable, natural log, 0 log(0/q) = 0.
inline double marginal_kl(const Marginal& p, const Marginal& q) {
  double kl = 0.0;
  for (int s = 0; s < 2; ++s) {
    if (p[s] <= 0) continue;
    if (q[s] <= 0) return std::numeric_limits<double>::infinity();
    kl += p[s] * std::log(p[s] / q[s]);
  }
  return kl;
}

inline std::vector<double> per_variable_kl(const Marginals& exact, const Marginals& approx) {
  if (exact.size() != approx.size()) throw Error(ErrorKind::BadParameter, "marginal tables differ in length");
  std::vector<double> out(exact.size());
  for (std::size_t i = 0; i < exact.size(); ++i) out[i] = marginal_kl(exact[i], approx[i]);
  return out;
}

/// Mean per-variable KL divergence; may be +inf.
inline double avg_kl(const Marginals& exact, const Marginals& approx) {
  std::vector<double> kl = per_variable_kl(exact, approx);
  if (kl.empty()) return 0.0;
  double sum = 0.0;
  for (double k : kl) sum += k;
  return sum / static_cast<double>(kl.size());
}

struct EvalReport {
  double log10_z_estimate = 0.0;
  std::optional<double> log10_z_reference;
  std::optional<double> delta;
  std::optional<double> avg_kl;
  std::optional<std::vector<double>> per_variable_kl;
};

/// Report for a log Z estimate against an optional reference (both natural
/// log).
inline EvalReport make_report(double log_z, std::optional<double> log_z_reference) {
  EvalReport r;
  r.log10_z_estimate = log_z / std::log(10.0);
  if (log_z_reference) {
    r.log10_z_reference = *log_z_reference / std::log(10.0);
    r.delta = log_relative_diff(log_z, *log_z_reference);
  }
  return r;
}

}  // namespace quantal
