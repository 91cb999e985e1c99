#pragma once

// Command-line front end. run() is separate from main() so tests can drive it
// with string streams.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "quantal/quantal.hpp"

namespace quantal::cli {

using nlohmann::json;

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kSyntax = 3,
  kArity = 4,
  kNegative = 5,
  kUnknownVariable = 6,
  kBadParameter = 7,
  kTooLarge = 8,
  kDivisionByZero = 9,
  kOutOfBudget = 10,
  kDegenerateReference = 11,
  kTimeout = 124,
};

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::SyntaxError: return kSyntax;
    case ErrorKind::UnsupportedArity: return kArity;
    case ErrorKind::NegativeValue: return kNegative;
    case ErrorKind::UnknownVariable: return kUnknownVariable;
    case ErrorKind::BadParameter:
    case ErrorKind::BadTarget:
    case ErrorKind::UnorderedVariable: return kBadParameter;
    case ErrorKind::TooLarge: return kTooLarge;
    case ErrorKind::DivisionByZero: return kDivisionByZero;
    case ErrorKind::OutOfBudget: return kOutOfBudget;
    case ErrorKind::DegenerateReference: return kDegenerateReference;
    case ErrorKind::Timeout: return kTimeout;
  }
  return kOther;
}

/// "inf" or an integer >= 2.
inline std::size_t parse_budget(const std::string& s) {
  if (s == "inf" || s == "infinity") return kUnbounded;
  std::size_t pos = 0;
  unsigned long long k = 0;
  try {
    k = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw Error(ErrorKind::BadParameter, "k must be an integer or 'inf', got '" + s + "'");
  }
  if (pos != s.size()) throw Error(ErrorKind::BadParameter, "k must be an integer or 'inf', got '" + s + "'");
  if (k < 2) throw Error(ErrorKind::BadParameter, "k must be >= 2");
  return static_cast<std::size_t>(k);
}

inline json budget_json(std::size_t k) { return k == kUnbounded ? json("inf") : json(k); }

/// Non-finite numbers go out as strings; JSON has no infinity.
inline json number_json(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

inline double json_number(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline double to_log10(double ln) { return ln / std::log(10.0); }

/// Node cap from QUANTAL_MEM_LIMIT_MB, at roughly 64 bytes per node including
/// hash-table overhead.
inline std::size_t node_cap_from_env() {
  const char* mb = std::getenv("QUANTAL_MEM_LIMIT_MB");
  if (!mb || !*mb) return AddStore::kUnlimited;
  char* end = nullptr;
  double v = std::strtod(mb, &end);
  if (end == mb || !(v > 0)) throw Error(ErrorKind::BadParameter, "QUANTAL_MEM_LIMIT_MB must be a positive number");
  return static_cast<std::size_t>(v * 1048576.0 / 64.0);
}

struct Options {
  std::string input;
  std::vector<std::string> inputs;
  std::string evidence;
  std::string output;
  std::string k;
  std::string k_max = "inf";
  std::string mode = "upper";
  std::string heuristic = "min-error-merge";
  std::string measure = "wse";
  std::string variant = "belief-update";
  std::string order = "minfill";
  std::string method = "brute-force";
  std::string csv;
  double timeout_s = 0;
  std::size_t n = 0;
  double beta = 100;
  std::uint64_t seed = 0;
  std::size_t max_iterations = 50;
  double epsilon = 1e-6;
  bool requantize = false;
  std::size_t potential = 0;
};

inline BoundMode parse_mode(const std::string& s) {
  if (s == "upper") return BoundMode::Upper;
  if (s == "lower") return BoundMode::Lower;
  return BoundMode::Approx;
}

inline Heuristic parse_heuristic(const std::string& s) {
  if (s == "min-error") return Heuristic::MinError;
  if (s == "min-merge") return Heuristic::MinMerge;
  return Heuristic::MinErrorMerge;
}

inline QuantizeConfig quantize_config(const Options& o) {
  QuantizeConfig q;
  q.mode = parse_mode(o.mode);
  q.heuristic = parse_heuristic(o.heuristic);
  q.measure = o.measure == "kl" ? ErrorMeasure::WeightedKL : ErrorMeasure::WeightedSquaredError;
  return q;
}

inline MarkovNet load_net(const Options& o) {
  MarkovNet net = read_uai_file(o.input);
  if (!o.evidence.empty()) net = apply_evidence(net, read_evidence_file(o.evidence, net.num_vars));
  return net;
}

inline std::optional<Clock::time_point> deadline_of(const Options& o) {
  if (o.timeout_s <= 0) return std::nullopt;
  return Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(o.timeout_s));
}

inline double ms_since(Clock::time_point t) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
}

inline void write_marginals(std::ostream& out, const Marginals& m) {
  std::ostringstream line;
  line << std::fixed << std::setprecision(12);
  for (std::size_t v = 0; v < m.size(); ++v) line << v << ' ' << m[v][0] << ' ' << m[v][1] << '\n';
  out << line.str();
}

inline int cmd_partition(const Options& o, std::ostream& out) {
  MarkovNet net = load_net(o);
  const std::size_t cap = node_cap_from_env();
  const QuantizeConfig q = quantize_config(o);
  EliminationOrder order = minfill_order(primal_graph(net));
  auto emit = [&](std::size_t k, double log_z, double elapsed, std::size_t max_nodes, bool exact, const std::string& status) {
    json r{{"k", budget_json(k)},
           {"log10_Z", number_json(to_log10(log_z))},
           {"mode", to_string(q.mode)},
           {"heuristic", to_string(q.heuristic)},
           {"elapsed_ms", elapsed},
           {"max_intermediate_nodes", max_nodes},
           {"exact", exact},
           {"status", status},
           {"induced_width", order.induced_width}};
    out << r.dump() << '\n' << std::flush;
  };
  if (!o.k.empty()) {
    AbqOptions opts;
    opts.k = parse_budget(o.k);
    opts.quantize = q;
    opts.order = order;
    opts.deadline = deadline_of(o);
    opts.max_nodes = cap;
    auto start = Clock::now();
    AbqResult r = abq(net, opts);
    emit(opts.k, r.log_z, ms_since(start), r.stats.max_intermediate_nodes, r.exact, "ok");
    return kOk;
  }
  AnytimeOptions opts;
  opts.quantize = q;
  opts.k_max = parse_budget(o.k_max);
  opts.order = order;
  opts.deadline = deadline_of(o);
  opts.max_nodes = cap;
  int code = kOk;
  abq_anytime(net, opts, [&](const AnytimeRecord& rec) {
    emit(rec.k, rec.log_z, rec.elapsed_ms, rec.max_intermediate_nodes, rec.exact, rec.status);
    if (rec.status == "Timeout") code = kTimeout;
  });
  return code;
}

inline int cmd_marginals(const Options& o, std::ostream& out) {
  MarkovNet net = load_net(o);
  IabqConfig cfg;
  cfg.variant = o.variant == "sum-product" ? IabqVariant::SumProduct : IabqVariant::BeliefUpdate;
  cfg.k = o.k.empty() ? kUnbounded : parse_budget(o.k);
  cfg.quantize = quantize_config(o);
  cfg.max_iterations = o.max_iterations;
  cfg.epsilon = o.epsilon;
  cfg.requantize_after_division = o.requantize;
  cfg.deadline = deadline_of(o);
  cfg.max_nodes = node_cap_from_env();
  auto start = Clock::now();
  JunctionTree tree = build_junction_tree(net, minfill_order(primal_graph(net)));
  IabqResult r = iabq(net, tree, cfg);
  write_marginals(out, r.marginals);
  json rec{{"variant", to_string(cfg.variant)},
           {"k", budget_json(cfg.k)},
           {"mode", to_string(cfg.quantize.mode)},
           {"heuristic", to_string(cfg.quantize.heuristic)},
           {"iterations", r.iterations_used},
           {"converged", r.converged},
           {"elapsed_ms", ms_since(start)}};
  out << rec.dump() << '\n';
  return kOk;
}

inline int cmd_exact(const Options& o, std::ostream& out) {
  MarkovNet net = load_net(o);
  auto start = Clock::now();
  if (o.method == "abq") {
    AbqOptions opts;
    opts.max_nodes = node_cap_from_env();
    opts.deadline = deadline_of(o);
    AbqResult r = abq(net, opts);
    out << json{{"method", "abq"}, {"k", "inf"}, {"log10_Z", number_json(to_log10(r.log_z))}, {"elapsed_ms", ms_since(start)}}.dump()
        << '\n';
    return kOk;
  }
  BruteForceResult r = brute_force(net);
  write_marginals(out, r.marginals);
  out << json{{"method", "brute-force"}, {"log10_Z", number_json(to_log10(r.log_z))}, {"elapsed_ms", ms_since(start)}}.dump()
      << '\n';
  return kOk;
}

inline int cmd_gen_ising(const Options& o, std::ostream& out) {
  MarkovNet net = gen_ising(o.n, o.beta, o.seed);
  std::ostringstream beta;
  beta << std::setprecision(17) << o.beta;
  out << "# gen-ising n=" << o.n << " beta=" << beta.str() << " seed=" << o.seed << " rng=mt19937_64\n";
  out << serialize_uai(net);
  return kOk;
}

/// Contents of a result file: JSON records plus an optional marginal table.
struct ResultFile {
  std::vector<json> records;
  Marginals marginals;

  /// log Z (natural) of the last record carrying one.
  std::optional<double> log_z() const {
    for (auto it = records.rbegin(); it != records.rend(); ++it)
      if (it->contains("log10_Z")) return json_number((*it)["log10_Z"]) * std::log(10.0);
    return std::nullopt;
  }
};

inline ResultFile read_result_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::SyntaxError, "cannot open " + path);
  ResultFile f;
  std::string line;
  while (std::getline(in, line)) {
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '{') {
      try {
        f.records.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw Error(ErrorKind::SyntaxError, std::string("bad JSON record: ") + e.what());
      }
      continue;
    }
    std::istringstream ls(line);
    std::size_t v;
    double p0, p1;
    if (!(ls >> v >> p0 >> p1)) throw Error(ErrorKind::SyntaxError, "bad marginal line '" + line + "'");
    if (v != f.marginals.size()) throw Error(ErrorKind::SyntaxError, "marginal lines out of order");
    f.marginals.push_back({p0, p1});
  }
  return f;
}

inline int cmd_compare(const Options& o, std::ostream& out) {
  if (o.inputs.size() != 2) throw Error(ErrorKind::BadParameter, "compare needs --input REFERENCE --input CANDIDATE");
  ResultFile ref = read_result_file(o.inputs[0]);
  ResultFile cand = read_result_file(o.inputs[1]);
  json report;
  std::optional<double> ref_z = ref.log_z();
  std::optional<double> cand_z = cand.log_z();
  if (cand_z) report["log10_Z_estimate"] = number_json(to_log10(*cand_z));
  if (ref_z) report["log10_Z_reference"] = number_json(to_log10(*ref_z));
  if (ref_z && cand_z) report["delta"] = number_json(log_relative_diff(*cand_z, *ref_z));
  if (!ref.marginals.empty() && !cand.marginals.empty()) {
    auto per = per_variable_kl(ref.marginals, cand.marginals);
    report["avg_kl"] = number_json(avg_kl(ref.marginals, cand.marginals));
    json arr = json::array();
    for (double x : per) arr.push_back(number_json(x));
    report["per_variable_kl"] = arr;
  }
  if (report.empty()) throw Error(ErrorKind::BadParameter, "nothing comparable in the two files");
  if (!o.csv.empty()) {
    std::ofstream csv(o.csv);
    if (!csv) throw Error(ErrorKind::BadParameter, "cannot write " + o.csv);
    csv << "k,log10_Z,delta,elapsed_ms\n" << std::setprecision(17);
    for (const auto& r : cand.records) {
      if (!r.contains("log10_Z")) continue;
      double lz = json_number(r["log10_Z"]) * std::log(10.0);
      csv << (r.contains("k") ? r["k"].dump() : "") << ',' << to_log10(lz) << ',';
      if (ref_z) csv << log_relative_diff(lz, *ref_z);
      csv << ',' << (r.contains("elapsed_ms") ? json_number(r["elapsed_ms"]) : 0.0) << '\n';
    }
  }
  out << report.dump() << '\n';
  return kOk;
}

inline int cmd_dump_add(const Options& o, std::ostream& out) {
  MarkovNet net = load_net(o);
  if (o.potential >= net.potentials.size()) throw Error(ErrorKind::BadParameter, "no potential with that index");
  EliminationOrder order = minfill_order(primal_graph(net));
  std::vector<VarId> levels;
  for (VarId v : order.order)
    if (net.is_free(v)) levels.push_back(v);
  AddStore store(levels);
  out << store.to_dot(store.from_potential(net.potentials[o.potential]));
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bounded-size ADD inference for binary Markov networks", "quantal"};
  app.require_subcommand(1);
  Options o;

  const std::vector<std::string> modes{"upper", "lower", "approx"};
  const std::vector<std::string> heuristics{"min-error", "min-merge", "min-error-merge"};
  auto add_quantize = [&](CLI::App* c) {
    c->add_option("--mode", o.mode, "upper | lower | approx")->check(CLI::IsMember(modes));
    c->add_option("--heuristic", o.heuristic)->check(CLI::IsMember(heuristics));
    c->add_option("--measure", o.measure, "error measure: wse | kl")->check(CLI::IsMember({"wse", "kl"}));
    c->add_option("--order", o.order)->check(CLI::IsMember({"minfill"}));
  };
  auto add_io = [&](CLI::App* c) {
    c->add_option("--input", o.input)->required();
    c->add_option("--evidence", o.evidence);
    c->add_option("--output", o.output);
    c->add_option("--timeout-s", o.timeout_s)->check(CLI::NonNegativeNumber);
    c->add_option("--seed", o.seed, "accepted for uniformity; runs are deterministic");
  };

  auto* partition = app.add_subcommand("partition", "log Z bound or estimate by ABQ");
  add_io(partition);
  add_quantize(partition);
  partition->add_option("--k", o.k, "single budget; omit for the doubling schedule");
  partition->add_option("--k-max", o.k_max, "last budget of the doubling schedule");

  auto* marginals = app.add_subcommand("marginals", "posterior marginals by IABQ");
  add_io(marginals);
  add_quantize(marginals);
  marginals->add_option("--k", o.k, "budget, default inf");
  marginals->add_option("--variant", o.variant)->check(CLI::IsMember({"sum-product", "belief-update"}));
  marginals->add_option("--max-iterations", o.max_iterations)->check(CLI::PositiveNumber);
  marginals->add_option("--epsilon", o.epsilon)->check(CLI::PositiveNumber);
  marginals->add_flag("--requantize-after-division", o.requantize);

  auto* exact = app.add_subcommand("exact", "exact log Z");
  add_io(exact);
  exact->add_option("--method", o.method)->check(CLI::IsMember({"brute-force", "abq"}));

  auto* gen = app.add_subcommand("gen-ising", "write a random Ising grid in UAI format");
  gen->add_option("--n", o.n, "grid side")->required();
  gen->add_option("--beta", o.beta);
  gen->add_option("--seed", o.seed);
  gen->add_option("--output", o.output);

  auto* compare = app.add_subcommand("compare", "delta and KL between a reference and a candidate result file");
  compare->add_option("--input", o.inputs, "reference, then candidate")->required()->expected(2, 2)->take_all();
  compare->add_option("--csv", o.csv, "write the candidate's records as CSV");
  compare->add_option("--output", o.output);

  auto* dump = app.add_subcommand("dump-add", "DOT graph of one potential's ADD");
  add_io(dump);
  dump->add_option("--potential", o.potential, "potential index");

  // The marginals command defaults to approximation, not bounds.
  marginals->preparse_callback([&](std::size_t) { o.mode = "approx"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    // Flags are validated before any input is read.
    if (!o.k.empty()) parse_budget(o.k);
    parse_budget(o.k_max);

    std::ofstream file;
    std::ostream* sink = &out;
    if (!o.output.empty()) {
      file.open(o.output, std::ios::out | std::ios::trunc);
      if (!file) throw Error(ErrorKind::BadParameter, "cannot write " + o.output);
      sink = &file;
    }
    if (*partition) return cmd_partition(o, *sink);
    if (*marginals) return cmd_marginals(o, *sink);
    if (*exact) return cmd_exact(o, *sink);
    if (*gen) return cmd_gen_ising(o, *sink);
    if (*compare) return cmd_compare(o, *sink);
    if (*dump) return cmd_dump_add(o, *sink);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}

}  // namespace quantal::cli
