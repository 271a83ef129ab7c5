#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <yaml-cpp/yaml.h>

#include "dsa/constraints.hpp"
#include "dsa/diagnostics.hpp"
#include "dsa/errors.hpp"
#include "dsa/gossip.hpp"
#include "dsa/power_alloc.hpp"
#include "dsa/quadratic.hpp"
#include "dsa/sa_core.hpp"

namespace dsa::experiment {

enum class ProblemKind { kQuadraticConsensus, kPowerAlloc, kHalfspaceToy };

inline std::string to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::kQuadraticConsensus: return "quadratic-consensus";
    case ProblemKind::kPowerAlloc: return "power-alloc";
    case ProblemKind::kHalfspaceToy: return "halfspace-toy";
  }
  return "?";
}

struct InitialSpec {
  enum class Kind { kUniform, kExplicit, kFeasibleRandom };
  /// uniform: coordinates i.i.d. on [low, high], then projected onto G.
  /// feasible-random: power problems only, coordinates on [0, P_i / K].
  Kind kind = Kind::kUniform;
  double low = -10.0;
  double high = 10.0;
  std::vector<std::vector<double>> values;

  friend bool operator==(const InitialSpec&, const InitialSpec&) = default;
};

struct CltSettings {
  /// 0 means n_iter.
  std::uint64_t tail_iteration = 0;
  double radius = 0.5;

  friend bool operator==(const CltSettings&, const CltSettings&) = default;
};

/// Fully validated experiment description. Agent and coordinate indices in
/// config files are 1-based; here they are 0-based.
struct ExperimentSpec {
  ProblemKind problem = ProblemKind::kQuadraticConsensus;

  std::vector<std::vector<double>> centers;
  double noise_sigma = 0.1;
  ConstraintSet constraint;

  power::PowerSystem power;
  std::size_t objective_trials = 1000;
  std::size_t gradient_trials = 1000;

  Graph graph;
  StepSchedule schedule{0.5, 0.75};
  Laziness laziness{1.0, 0.0};
  std::uint64_t n_iter = 10000;
  std::size_t replicas = 1;
  std::uint64_t seed = 1;
  std::uint64_t record_every = 10;
  InitialSpec initial;
  CltSettings clt;
  std::string output_dir = "out";
  bool override_validation = false;
  unsigned threads = 0;

  std::size_t dimension() const {
    return problem == ProblemKind::kPowerAlloc ? power.dimension()
                                               : centers.front().size();
  }

  friend bool operator==(const ExperimentSpec&, const ExperimentSpec&) = default;
};

// ---------------------------------------------------------------------------
// Presets

inline std::vector<std::vector<double>> default_centers() {
  return {{1.0, 2.0}, {3.0, -1.0}, {-2.0, 0.0}, {2.0, 3.0}};
}

inline std::vector<std::string> preset_names() {
  return {"quadratic-consensus", "scalar-clt", "scalar-clt-unit-xi",
          "box-toy", "halfspace-toy", "paper-scenario"};
}

inline ExperimentSpec preset_spec(const std::string& name) {
  ExperimentSpec s;
  s.graph = power::paper_graph();
  s.centers = default_centers();
  s.constraint = ConstraintSet::unconstrained(2);
  if (name == "quadratic-consensus") return s;
  if (name == "scalar-clt" || name == "scalar-clt-unit-xi") {
    s.centers = {{0.0}, {0.0}, {0.0}, {0.0}};
    s.constraint = ConstraintSet::unconstrained(1);
    s.noise_sigma = 1.0;
    s.schedule = {1.0, name == "scalar-clt" ? 0.75 : 1.0};
    s.n_iter = 100000;
    s.record_every = 100000;
    s.replicas = 500;
    s.initial = {InitialSpec::Kind::kUniform, -1.0, 1.0, {}};
    s.clt = {100000, 0.5};
    return s;
  }
  if (name == "box-toy") {
    s.centers = {{1.5, 0.2}, {2.0, 0.8}, {1.8, 0.4}, {1.7, 0.6}};
    s.constraint = ConstraintSet::box(Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.0, 1.0));
    s.initial = {InitialSpec::Kind::kUniform, 0.0, 1.0, {}};
    return s;
  }
  if (name == "halfspace-toy") {
    s.problem = ProblemKind::kHalfspaceToy;
    s.centers = {{1.0, 1.0}, {2.0, 0.0}, {0.0, 2.0}, {1.5, 1.5}};
    Eigen::MatrixXd normals(3, 2);
    normals << 1.0, 1.0, -1.0, 0.0, 0.0, -1.0;
    s.constraint = ConstraintSet::halfspaces(normals, Eigen::Vector3d(1.0, 0.0, 0.0));
    s.initial = {InitialSpec::Kind::kUniform, 0.0, 1.0, {}};
    return s;
  }
  if (name == "paper-scenario") {
    s.problem = ProblemKind::kPowerAlloc;
    s.centers.clear();
    s.constraint = ConstraintSet();
    s.noise_sigma = 0.0;
    s.power = power::paper_system();
    s.schedule = {power::kScenarioGamma0, power::kScenarioXi};
    s.n_iter = power::kScenarioIterations;
    s.record_every = power::kScenarioRecordEvery;
    s.initial = {InitialSpec::Kind::kFeasibleRandom, 0.0, 0.0, {}};
    return s;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// YAML emission

namespace detail {

/// Shortest text that parses back to the same double.
inline std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline void emit_vector(YAML::Emitter& out, const std::vector<double>& v) {
  out << YAML::Flow << YAML::BeginSeq;
  for (double x : v) out << num(x);
  out << YAML::EndSeq;
}

inline void emit_vector(YAML::Emitter& out, const Eigen::VectorXd& v) {
  emit_vector(out, std::vector<double>(v.data(), v.data() + v.size()));
}

inline void emit_matrix(YAML::Emitter& out, const std::vector<std::vector<double>>& m) {
  out << YAML::Flow << YAML::BeginSeq;
  for (const auto& row : m) {
    out << YAML::Flow << YAML::BeginSeq;
    for (double x : row) out << num(x);
    out << YAML::EndSeq;
  }
  out << YAML::EndSeq;
}

inline void emit_constraint(YAML::Emitter& out, const ConstraintSet& set) {
  out << YAML::BeginMap;
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, Unconstrained>) {
          out << YAML::Key << "kind" << YAML::Value << "unconstrained";
        } else if constexpr (std::is_same_v<T, Box>) {
          out << YAML::Key << "kind" << YAML::Value << "box";
          out << YAML::Key << "lower" << YAML::Value;
          emit_vector(out, k.lower);
          out << YAML::Key << "upper" << YAML::Value;
          emit_vector(out, k.upper);
        } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
          out << YAML::Key << "kind" << YAML::Value << "budget-simplex";
          out << YAML::Key << "groups" << YAML::Value << YAML::Flow << YAML::BeginSeq;
          for (const auto& g : k.groups) {
            out << YAML::Flow << YAML::BeginSeq;
            for (auto c : g) out << c + 1;
            out << YAML::EndSeq;
          }
          out << YAML::EndSeq;
          out << YAML::Key << "budgets" << YAML::Value;
          emit_vector(out, k.budgets);
        } else {
          out << YAML::Key << "kind" << YAML::Value << "halfspaces";
          std::vector<std::vector<double>> rows;
          for (Eigen::Index j = 0; j < k.normals.rows(); ++j) {
            Eigen::VectorXd r = k.normals.row(j).transpose();
            rows.emplace_back(r.data(), r.data() + r.size());
          }
          out << YAML::Key << "normals" << YAML::Value;
          emit_matrix(out, rows);
          out << YAML::Key << "offsets" << YAML::Value;
          emit_vector(out, k.offsets);
        }
      },
      set.kind());
  out << YAML::EndMap;
}

}  // namespace detail

/// Full, explicit config text for a spec (no preset reference).
inline std::string to_yaml(const ExperimentSpec& s) {
  YAML::Emitter out;
  out << YAML::BeginMap;

  out << YAML::Key << "problem" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << to_string(s.problem);
  if (s.problem == ProblemKind::kPowerAlloc) {
    out << YAML::Key << "subchannels" << YAML::Value << s.power.subchannels;
    out << YAML::Key << "weights" << YAML::Value;
    detail::emit_vector(out, s.power.weights);
    out << YAML::Key << "noise_variances" << YAML::Value;
    detail::emit_vector(out, s.power.noise_variances);
    out << YAML::Key << "budgets" << YAML::Value;
    detail::emit_vector(out, s.power.budgets);
    out << YAML::Key << "channel" << YAML::Value << YAML::Flow << YAML::BeginMap;
    out << YAML::Key << "distribution" << YAML::Value
        << (s.power.channel.kind == power::ChannelDistribution::Kind::kExponential
                ? "exponential"
                : "deterministic");
    out << YAML::Key << "mean" << YAML::Value << detail::num(s.power.channel.mean);
    out << YAML::EndMap;
    out << YAML::Key << "objective_trials" << YAML::Value << s.objective_trials;
    out << YAML::Key << "gradient_trials" << YAML::Value << s.gradient_trials;
  } else {
    out << YAML::Key << "centers" << YAML::Value;
    detail::emit_matrix(out, s.centers);
    out << YAML::Key << "noise_sigma" << YAML::Value << detail::num(s.noise_sigma);
    out << YAML::Key << "constraint" << YAML::Value;
    detail::emit_constraint(out, s.constraint);
  }
  out << YAML::EndMap;

  out << YAML::Key << "graph" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "agents" << YAML::Value << s.graph.n_agents();
  out << YAML::Key << "edges" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& e : s.graph.edges())
    out << YAML::Flow << YAML::BeginSeq << e.first + 1 << e.second + 1 << YAML::EndSeq;
  out << YAML::EndSeq;
  if (!s.graph.uniform()) {
    out << YAML::Key << "weights" << YAML::Value;
    detail::emit_vector(out, s.graph.pair_probs());
  }
  out << YAML::EndMap;

  out << YAML::Key << "schedule" << YAML::Value << YAML::Flow << YAML::BeginMap
      << YAML::Key << "gamma0" << YAML::Value << detail::num(s.schedule.gamma0) << YAML::Key
      << "xi" << YAML::Value << detail::num(s.schedule.xi) << YAML::EndMap;
  out << YAML::Key << "laziness" << YAML::Value << YAML::Flow << YAML::BeginMap
      << YAML::Key << "c" << YAML::Value << detail::num(s.laziness.c) << YAML::Key << "eta"
      << YAML::Value << detail::num(s.laziness.eta) << YAML::EndMap;
  out << YAML::Key << "n_iter" << YAML::Value << s.n_iter;
  out << YAML::Key << "replicas" << YAML::Value << s.replicas;
  out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::Key << "record_every" << YAML::Value << s.record_every;

  out << YAML::Key << "initial" << YAML::Value << YAML::BeginMap;
  switch (s.initial.kind) {
    case InitialSpec::Kind::kUniform:
      out << YAML::Key << "kind" << YAML::Value << "uniform" << YAML::Key << "low"
          << YAML::Value << detail::num(s.initial.low) << YAML::Key << "high" << YAML::Value
          << detail::num(s.initial.high);
      break;
    case InitialSpec::Kind::kExplicit:
      out << YAML::Key << "kind" << YAML::Value << "explicit" << YAML::Key
          << "values" << YAML::Value;
      detail::emit_matrix(out, s.initial.values);
      break;
    case InitialSpec::Kind::kFeasibleRandom:
      out << YAML::Key << "kind" << YAML::Value << "feasible-random";
      break;
  }
  out << YAML::EndMap;

  out << YAML::Key << "clt" << YAML::Value << YAML::Flow << YAML::BeginMap
      << YAML::Key << "tail_iteration" << YAML::Value << s.clt.tail_iteration
      << YAML::Key << "radius" << YAML::Value << detail::num(s.clt.radius) << YAML::EndMap;
  out << YAML::Key << "output" << YAML::Value << YAML::Flow << YAML::BeginMap
      << YAML::Key << "dir" << YAML::Value << s.output_dir << YAML::EndMap;
  out << YAML::Key << "override_validation" << YAML::Value << s.override_validation;
  out << YAML::Key << "threads" << YAML::Value << s.threads;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string where(const YAML::Node& node) {
  const auto mark = node.Mark();
  if (mark.line < 0) return "";
  return " (line " + std::to_string(mark.line + 1) + ")";
}

[[noreturn]] inline void fail(const std::string& msg, const YAML::Node& node) {
  throw ConfigError(msg + where(node));
}

inline void check_keys(const YAML::Node& map, const std::string& path,
                       const std::set<std::string>& allowed) {
  if (!map.IsMap()) fail("'" + path + "' must be a mapping", map);
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key))
      fail("unknown key '" + (path.empty() ? key : path + "." + key) + "'", kv.first);
  }
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& name) {
  if (!node.IsScalar()) fail("'" + name + "' must be a scalar", node);
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    fail("'" + name + "' has an invalid value '" + node.Scalar() + "'", node);
  }
}

inline std::vector<double> vec(const YAML::Node& node, const std::string& name) {
  if (!node.IsSequence()) fail("'" + name + "' must be a list", node);
  std::vector<double> out;
  for (const auto& x : node) out.push_back(scalar<double>(x, name));
  return out;
}

inline std::vector<std::vector<double>> mat(const YAML::Node& node,
                                            const std::string& name) {
  if (!node.IsSequence()) fail("'" + name + "' must be a list of lists", node);
  std::vector<std::vector<double>> out;
  for (const auto& row : node) out.push_back(vec(row, name));
  return out;
}

inline std::size_t one_based(const YAML::Node& node, std::size_t limit,
                             const std::string& name) {
  const auto v = scalar<long long>(node, name);
  if (v < 1 || static_cast<std::size_t>(v) > limit)
    fail("'" + name + "' index " + std::to_string(v) + " out of range [1, " +
             std::to_string(limit) + "]",
         node);
  return static_cast<std::size_t>(v - 1);
}

inline YAML::Node merge(const YAML::Node& base, const YAML::Node& overlay) {
  if (!base.IsMap() || !overlay.IsMap()) return YAML::Clone(overlay);
  YAML::Node out = YAML::Clone(base);
  for (const auto& kv : overlay) {
    const auto key = kv.first.as<std::string>();
    if (out[key] && out[key].IsMap() && kv.second.IsMap())
      out[key] = merge(out[key], kv.second);
    else
      out[key] = YAML::Clone(kv.second);
  }
  return out;
}

inline ConstraintSet parse_constraint(const YAML::Node& node, std::size_t d) {
  if (!node || node.IsNull()) return ConstraintSet::unconstrained(d);
  if (!node.IsMap() || !node["kind"]) fail("'problem.constraint' needs a kind", node);
  const auto kind = scalar<std::string>(node["kind"], "problem.constraint.kind");
  try {
    if (kind == "unconstrained") {
      check_keys(node, "problem.constraint", {"kind"});
      return ConstraintSet::unconstrained(d);
    }
    if (kind == "box") {
      check_keys(node, "problem.constraint", {"kind", "lower", "upper"});
      auto lo = vec(node["lower"], "problem.constraint.lower");
      auto hi = vec(node["upper"], "problem.constraint.upper");
      if (lo.size() != d || hi.size() != d)
        fail("box bounds must have the problem dimension " + std::to_string(d), node);
      return ConstraintSet::box(Eigen::Map<Eigen::VectorXd>(lo.data(), lo.size()),
                                Eigen::Map<Eigen::VectorXd>(hi.data(), hi.size()));
    }
    if (kind == "budget-simplex") {
      check_keys(node, "problem.constraint", {"kind", "groups", "budgets"});
      std::vector<std::vector<std::size_t>> groups;
      const auto& gnode = node["groups"];
      if (!gnode.IsSequence()) fail("'problem.constraint.groups' must be a list", node);
      for (const auto& g : gnode) {
        if (!g.IsSequence()) fail("each budget group must be a list", g);
        groups.emplace_back();
        for (const auto& c : g)
          groups.back().push_back(one_based(c, d, "problem.constraint.groups"));
      }
      return ConstraintSet::budget_simplex(d, groups,
                                           vec(node["budgets"], "problem.constraint.budgets"));
    }
    if (kind == "halfspaces") {
      check_keys(node, "problem.constraint", {"kind", "normals", "offsets"});
      auto rows = mat(node["normals"], "problem.constraint.normals");
      auto b = vec(node["offsets"], "problem.constraint.offsets");
      Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
      for (std::size_t j = 0; j < rows.size(); ++j) {
        if (rows[j].size() != d)
          fail("halfspace normal must have the problem dimension", node["normals"]);
        for (std::size_t k = 0; k < d; ++k)
          a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = rows[j][k];
      }
      return ConstraintSet::halfspaces(a, Eigen::Map<Eigen::VectorXd>(b.data(), b.size()));
    }
  } catch (const ArgumentError& e) {
    fail(std::string("invalid constraint: ") + e.what(), node);
  } catch (const InfeasibleError& e) {
    fail(std::string("infeasible constraint: ") + e.what(), node);
  }
  fail("unknown constraint kind '" + kind + "'", node["kind"]);
}

inline ProblemKind parse_kind(const YAML::Node& node) {
  const auto k = scalar<std::string>(node, "problem.kind");
  if (k == "quadratic-consensus") return ProblemKind::kQuadraticConsensus;
  if (k == "power-alloc") return ProblemKind::kPowerAlloc;
  if (k == "halfspace-toy") return ProblemKind::kHalfspaceToy;
  fail("unknown problem kind '" + k + "'", node);
}

inline void apply_override(YAML::Node& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(assignment.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override value for '" + path + "' is not valid YAML");
  }
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) keys.push_back(part);
  if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  // yaml-cpp nodes are handles, so walking by assignment mutates `root`.
  std::vector<YAML::Node> chain{root};
  for (std::size_t k = 0; k + 1 < keys.size(); ++k) {
    YAML::Node child = chain.back()[keys[k]];
    if (!child.IsMap()) {
      chain.back()[keys[k]] = YAML::Node(YAML::NodeType::Map);
      child = chain.back()[keys[k]];
    }
    chain.push_back(child);
  }
  chain.back()[keys.back()] = value;
}

}  // namespace detail

/**
 * Builds a validated spec from a YAML tree. A `preset` key selects a base spec
 * that the remaining keys overlay (maps merge, everything else replaces).
 */
inline ExperimentSpec parse_config(YAML::Node root,
                                   const std::vector<std::string>& overrides = {}) {
  using namespace detail;
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  for (const auto& o : overrides) apply_override(root, o);
  if (!root.IsMap()) throw ConfigError("config must be a mapping at the top level");

  check_keys(root, "",
             {"preset", "problem", "graph", "schedule", "laziness", "n_iter", "replicas",
              "seed", "record_every", "initial", "clt", "output",
              "override_validation", "threads"});

  if (root["preset"]) {
    const auto name = scalar<std::string>(root["preset"], "preset");
    YAML::Node overlay = YAML::Clone(root);
    overlay.remove("preset");
    YAML::Node base;
    try {
      base = YAML::Load(to_yaml(preset_spec(name)));
    } catch (const ConfigError&) {
      fail("unknown preset '" + name + "'", root["preset"]);
    }
    // A problem kind change discards the preset's problem section.
    if (overlay["problem"] && overlay["problem"]["kind"] &&
        overlay["problem"]["kind"].as<std::string>() !=
            base["problem"]["kind"].as<std::string>())
      base.remove("problem");
    return parse_config(merge(base, overlay));
  }

  ExperimentSpec s;

  // graph
  std::size_t agents = 4;
  if (const auto g = root["graph"]) {
    check_keys(g, "graph", {"agents", "edges", "weights"});
    if (!g["agents"] || !g["edges"]) fail("'graph' needs agents and edges", g);
    agents = scalar<std::size_t>(g["agents"], "graph.agents");
    if (agents < 2) fail("'graph.agents' must be >= 2", g["agents"]);
    std::vector<Edge> edges;
    if (!g["edges"].IsSequence()) fail("'graph.edges' must be a list", g["edges"]);
    for (const auto& e : g["edges"]) {
      if (!e.IsSequence() || e.size() != 2) fail("each edge must be a pair [i, j]", e);
      edges.push_back({one_based(e[0], agents, "graph.edges"),
                       one_based(e[1], agents, "graph.edges")});
    }
    try {
      if (g["weights"]) {
        auto w = vec(g["weights"], "graph.weights");
        if (w.size() != edges.size()) fail("one weight per edge is required", g["weights"]);
        s.graph = Graph::from_weights(agents, edges, w);
      } else {
        s.graph = Graph(agents, edges);
      }
    } catch (const ArgumentError& e) {
      fail(std::string("invalid graph: ") + e.what(), g);
    }
  } else {
    s.graph = power::paper_graph();
  }

  // problem
  const YAML::Node p = root["problem"];
  if (p) {
    if (!p.IsMap()) fail("'problem' must be a mapping", p);
    if (p["kind"]) s.problem = parse_kind(p["kind"]);
  }
  if (s.problem == ProblemKind::kPowerAlloc) {
    if (p) {
      check_keys(p, "problem",
                 {"kind", "subchannels", "weights", "noise_variances", "budgets",
                  "channel", "objective_trials", "gradient_trials"});
    }
    s.noise_sigma = 0.0;
    s.power = power::paper_system();
    if (p && p["subchannels"])
      s.power.subchannels = scalar<std::size_t>(p["subchannels"], "problem.subchannels");
    if (p && p["weights"]) s.power.weights = vec(p["weights"], "problem.weights");
    if (p && p["noise_variances"])
      s.power.noise_variances = vec(p["noise_variances"], "problem.noise_variances");
    if (p && p["budgets"]) s.power.budgets = vec(p["budgets"], "problem.budgets");
    if (p && p["channel"]) {
      const auto c = p["channel"];
      check_keys(c, "problem.channel", {"distribution", "mean"});
      if (c["distribution"]) {
        const auto dist = scalar<std::string>(c["distribution"], "problem.channel.distribution");
        if (dist == "exponential")
          s.power.channel.kind = power::ChannelDistribution::Kind::kExponential;
        else if (dist == "deterministic")
          s.power.channel.kind = power::ChannelDistribution::Kind::kDeterministic;
        else
          fail("unknown channel distribution '" + dist + "'", c["distribution"]);
      }
      if (c["mean"]) s.power.channel.mean = scalar<double>(c["mean"], "problem.channel.mean");
    }
    if (p && p["objective_trials"])
      s.objective_trials = scalar<std::size_t>(p["objective_trials"], "problem.objective_trials");
    if (p && p["gradient_trials"])
      s.gradient_trials = scalar<std::size_t>(p["gradient_trials"], "problem.gradient_trials");
    if (s.objective_trials < 1 || s.gradient_trials < 1)
      fail("Monte-Carlo trial counts must be >= 1", p);
    try {
      s.power.validate();
    } catch (const ArgumentError& e) {
      fail(std::string("invalid power system: ") + e.what(), p);
    }
    if (s.power.users() != agents)
      fail("power system has " + std::to_string(s.power.users()) +
               " users but the graph has " + std::to_string(agents) + " agents",
           p);
    s.initial.kind = InitialSpec::Kind::kFeasibleRandom;
  } else {
    if (p) check_keys(p, "problem", {"kind", "centers", "noise_sigma", "constraint"});
    if (p && p["centers"]) {
      s.centers = mat(p["centers"], "problem.centers");
    } else if (agents == 4) {
      s.centers = default_centers();
    } else {
      fail("'problem.centers' is required unless the graph has 4 agents", p ? p : root);
    }
    if (s.centers.size() != agents)
      fail("need one center per agent (" + std::to_string(agents) + ")",
           p && p["centers"] ? p["centers"] : root);
    const std::size_t d = s.centers.front().size();
    if (d == 0) fail("centers must be non-empty", p["centers"]);
    for (const auto& c : s.centers)
      if (c.size() != d) fail("all centers must have the same dimension", p["centers"]);
    if (p && p["noise_sigma"]) s.noise_sigma = scalar<double>(p["noise_sigma"], "problem.noise_sigma");
    if (!(s.noise_sigma >= 0.0)) fail("'problem.noise_sigma' must be >= 0", p["noise_sigma"]);
    s.constraint = parse_constraint(p ? p["constraint"] : YAML::Node(), d);
    if (s.problem == ProblemKind::kHalfspaceToy &&
        !std::holds_alternative<Halfspaces>(s.constraint.kind()))
      fail("halfspace-toy needs a halfspaces constraint", p);
  }

  if (const auto sch = root["schedule"]) {
    check_keys(sch, "schedule", {"gamma0", "xi"});
    if (sch["gamma0"]) s.schedule.gamma0 = scalar<double>(sch["gamma0"], "schedule.gamma0");
    if (sch["xi"]) s.schedule.xi = scalar<double>(sch["xi"], "schedule.xi");
  }
  if (!(s.schedule.gamma0 > 0.0)) fail("gamma0 must be > 0", root["schedule"]);
  if (!(s.schedule.xi > 0.5 && s.schedule.xi <= 1.0))
    fail("xi must be in (1/2, 1]", root["schedule"]);

  if (const auto l = root["laziness"]) {
    check_keys(l, "laziness", {"c", "eta"});
    if (l["c"]) s.laziness.c = scalar<double>(l["c"], "laziness.c");
    if (l["eta"]) s.laziness.eta = scalar<double>(l["eta"], "laziness.eta");
  }
  try {
    s.laziness.validate();
  } catch (const ArgumentError& e) {
    fail(e.what(), root["laziness"]);
  }

  if (root["n_iter"]) s.n_iter = scalar<std::uint64_t>(root["n_iter"], "n_iter");
  if (s.n_iter < 1) fail("n_iter must be >= 1", root["n_iter"]);
  if (root["replicas"]) s.replicas = scalar<std::size_t>(root["replicas"], "replicas");
  if (s.replicas < 1) fail("replicas must be >= 1", root["replicas"]);
  if (root["seed"]) s.seed = scalar<std::uint64_t>(root["seed"], "seed");
  if (root["record_every"]) s.record_every = scalar<std::uint64_t>(root["record_every"], "record_every");
  if (s.record_every < 1) fail("record_every must be >= 1", root["record_every"]);
  if (root["override_validation"])
    s.override_validation = scalar<bool>(root["override_validation"], "override_validation");
  if (root["threads"]) s.threads = scalar<unsigned>(root["threads"], "threads");

  if (const auto init = root["initial"]) {
    check_keys(init, "initial", {"kind", "low", "high", "values"});
    const auto kind = init["kind"] ? scalar<std::string>(init["kind"], "initial.kind")
                                   : std::string("uniform");
    if (kind == "uniform") {
      s.initial.kind = InitialSpec::Kind::kUniform;
      if (init["low"]) s.initial.low = scalar<double>(init["low"], "initial.low");
      if (init["high"]) s.initial.high = scalar<double>(init["high"], "initial.high");
      if (!(s.initial.low <= s.initial.high)) fail("initial.low must be <= initial.high", init);
    } else if (kind == "explicit") {
      s.initial.kind = InitialSpec::Kind::kExplicit;
      s.initial.values = mat(init["values"], "initial.values");
      if (s.initial.values.size() != agents)
        fail("initial.values needs one row per agent", init["values"]);
      for (const auto& row : s.initial.values)
        if (row.size() != s.dimension())
          fail("initial.values rows must have the problem dimension", init["values"]);
    } else if (kind == "feasible-random") {
      if (s.problem != ProblemKind::kPowerAlloc)
        fail("initial kind feasible-random applies to power-alloc only", init["kind"]);
      s.initial.kind = InitialSpec::Kind::kFeasibleRandom;
    } else {
      fail("unknown initial kind '" + kind + "'", init["kind"]);
    }
    if (s.initial.kind != InitialSpec::Kind::kUniform) s.initial.low = s.initial.high = 0.0;
  } else if (s.problem == ProblemKind::kPowerAlloc) {
    s.initial = {InitialSpec::Kind::kFeasibleRandom, 0.0, 0.0, {}};
  }
  if (s.problem == ProblemKind::kPowerAlloc &&
      s.initial.kind == InitialSpec::Kind::kUniform)
    fail("power-alloc needs a feasible-random or explicit initial point", root);

  if (const auto c = root["clt"]) {
    check_keys(c, "clt", {"tail_iteration", "radius"});
    if (c["tail_iteration"])
      s.clt.tail_iteration = scalar<std::uint64_t>(c["tail_iteration"], "clt.tail_iteration");
    if (c["radius"]) s.clt.radius = scalar<double>(c["radius"], "clt.radius");
    if (!(s.clt.radius > 0.0)) fail("clt.radius must be > 0", c);
  }
  if (const auto o = root["output"]) {
    check_keys(o, "output", {"dir"});
    if (o["dir"]) s.output_dir = scalar<std::string>(o["dir"], "output.dir");
  }
  return s;
}

inline ExperimentSpec parse_config_text(const std::string& text,
                                        const std::vector<std::string>& overrides = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("parse error at line " + std::to_string(e.mark.line + 1) + ", column " +
                      std::to_string(e.mark.column + 1) + ": " + e.msg);
  }
  try {
    return parse_config(root, overrides);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config error: ") + e.what());
  }
}

inline ExperimentSpec parse_config_file(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), overrides);
}

// ---------------------------------------------------------------------------
// Building runs

inline StackedIterate initial_state(const ExperimentSpec& s, const ConstraintSet& set,
                                    std::uint64_t replica) {
  const std::size_t d = s.dimension();
  const std::size_t n = s.graph.n_agents();
  switch (s.initial.kind) {
    case InitialSpec::Kind::kFeasibleRandom:
      return power::random_initial(s.power, n, s.seed, replica);
    case InitialSpec::Kind::kExplicit: {
      StackedIterate theta(d, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
          theta.block(i)(static_cast<Eigen::Index>(k)) = s.initial.values[i][k];
      return theta;
    }
    case InitialSpec::Kind::kUniform:
      break;
  }
  Rng rng = make_stream(s.seed, replica, StreamTag::kInitial);
  StackedIterate theta(d, n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd b(static_cast<Eigen::Index>(d));
    for (auto& x : b) x = s.initial.low + (s.initial.high - s.initial.low) * rng.uniform();
    theta.block(i) = set.project(b);
  }
  return theta;
}

inline Problem build_problem(const ExperimentSpec& s) {
  if (s.problem == ProblemKind::kPowerAlloc)
    return power::make_problem(
        s.power, power::EstimatorSettings{s.objective_trials, s.gradient_trials, s.seed});
  const auto d = static_cast<Eigen::Index>(s.dimension());
  Eigen::MatrixXd centers(d, static_cast<Eigen::Index>(s.centers.size()));
  for (std::size_t i = 0; i < s.centers.size(); ++i)
    for (Eigen::Index k = 0; k < d; ++k)
      centers(k, static_cast<Eigen::Index>(i)) = s.centers[i][static_cast<std::size_t>(k)];
  return quadratic_problem(centers, s.noise_sigma, s.constraint);
}

/// Run configuration for replica 0; other replicas differ in initial point.
inline RunConfig build_run_config(const ExperimentSpec& s) {
  RunConfig c;
  c.problem = build_problem(s);
  c.gossip = GossipModel{s.graph, s.laziness};
  c.schedule = s.schedule;
  c.n_iter = s.n_iter;
  c.seed = s.seed;
  c.initial = initial_state(s, c.problem.constraint, 0);
  c.replicas = s.replicas;
  c.record_every = s.record_every;
  c.override_validation = s.override_validation;
  return c;
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trace_header(std::size_t d) {
  std::string h = "n,gamma,disagreement,residual,objective";
  for (std::size_t k = 1; k <= d; ++k) h += ",avg_" + std::to_string(k);
  return h;
}

inline void write_trace_csv(std::ostream& out, const Trace& trace, std::size_t d) {
  out << trace_header(d) << '\n';
  for (const auto& r : trace) {
    out << r.n << ',' << format_double(r.gamma) << ',' << format_double(r.disagreement)
        << ',' << format_double(r.residual) << ',';
    if (r.objective) out << format_double(*r.objective);
    for (Eigen::Index k = 0; k < r.average.size(); ++k) out << ',' << format_double(r.average(k));
    out << '\n';
  }
}

inline void write_trace_csv(const std::filesystem::path& path, const Trace& trace,
                            std::size_t d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_trace_csv(out, trace, d);
}

inline Trace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  Trace trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() < 5) throw std::runtime_error("malformed trace row: " + line);
    TraceRecord r;
    r.n = std::stoull(cells[0]);
    r.gamma = std::stod(cells[1]);
    r.disagreement = std::stod(cells[2]);
    r.residual = std::stod(cells[3]);
    if (!cells[4].empty()) r.objective = std::stod(cells[4]);
    r.average.resize(static_cast<Eigen::Index>(cells.size() - 5));
    for (std::size_t k = 5; k < cells.size(); ++k)
      r.average(static_cast<Eigen::Index>(k - 5)) = std::stod(cells[k]);
    trace.push_back(std::move(r));
  }
  return trace;
}

/// Ordered key = value summary.
using Summary = std::vector<std::pair<std::string, std::string>>;

inline void write_summary(const std::filesystem::path& path, const Summary& summary) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : summary) out << k << " = " << v << '\n';
}

inline std::map<std::string, std::string> read_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::map<std::string, std::string> out;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline std::string trace_file_name(std::size_t replica, std::size_t replicas) {
  if (replicas == 1) return "trace.csv";
  char buf[32];
  std::snprintf(buf, sizeof buf, "trace_r%03zu.csv", replica);
  return buf;
}

/**
 * Summary quantities that depend only on the traces: medians across replicas
 * of the last row, and the decay exponent of the replica-mean squared
 * disagreement over the second half of the trace.
 */
inline Summary summarize_traces(const std::vector<Trace>& traces) {
  Summary s;
  std::vector<double> dis, res, obj;
  for (const auto& t : traces) {
    if (t.empty()) continue;
    dis.push_back(t.back().disagreement);
    res.push_back(t.back().residual);
    if (t.back().objective) obj.push_back(*t.back().objective);
  }
  s.emplace_back("final_disagreement", format_double(median(dis)));
  s.emplace_back("final_residual", format_double(median(res)));
  if (!obj.empty()) s.emplace_back("final_objective", format_double(median(obj)));
  std::string beta = "undefined";
  try {
    const auto fit = fit_decay_exponent(traces, 0.5);
    if (fit.defined) beta = format_double(fit.exponent);
  } catch (const InsufficientDataError&) {
  }
  s.emplace_back("fitted_beta", beta);
  if (!traces.empty() && !traces.front().empty()) {
    const auto d = traces.front().back().average.size();
    for (Eigen::Index k = 0; k < d; ++k) {
      std::vector<double> v;
      for (const auto& t : traces) v.push_back(t.back().average(k));
      s.emplace_back("final_average_" + std::to_string(k + 1), format_double(median(v)));
    }
  }
  return s;
}

struct ExperimentOutcome {
  std::vector<RunResult> results;
  Summary summary;
  std::vector<std::filesystem::path> trace_files;
  std::filesystem::path summary_file;
};

inline std::string validation_status(const RunConfig& config) {
  const auto report = validate_assumptions(config);
  if (report.all_passed()) return "pass";
  return "overridden: " + report.failures();
}

/// Runs every replica, writes one trace per replica and summary.txt.
inline ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
  const RunConfig config = build_run_config(spec);
  ExperimentOutcome out;
  out.results = run_replicas(
      config,
      [&](std::uint64_t r) { return initial_state(spec, config.problem.constraint, r); },
      spec.threads);

  const std::filesystem::path dir(spec.output_dir);
  std::filesystem::create_directories(dir);
  std::vector<Trace> traces;
  std::vector<double> initial;
  for (std::size_t r = 0; r < out.results.size(); ++r) {
    auto path = dir / trace_file_name(r, out.results.size());
    write_trace_csv(path, out.results[r].trace, spec.dimension());
    out.trace_files.push_back(path);
    traces.push_back(out.results[r].trace);
    initial.push_back(disagreement_norm(out.results[r].initial));
  }

  out.summary = {{"problem", to_string(spec.problem)},
                 {"seed", std::to_string(spec.seed)},
                 {"replicas", std::to_string(spec.replicas)},
                 {"n_iter", std::to_string(spec.n_iter)},
                 {"dimension", std::to_string(spec.dimension())},
                 {"validation", validation_status(config)},
                 {"initial_disagreement", format_double(median(initial))}};
  for (auto& kv : summarize_traces(traces)) out.summary.push_back(std::move(kv));
  out.summary_file = dir / "summary.txt";
  write_summary(out.summary_file, out.summary);
  return out;
}

struct CltOutcome {
  CltEstimate estimate;
  Summary summary;
  std::filesystem::path summary_file;
};

inline std::string format_matrix(const Eigen::MatrixXd& m) {
  std::string s;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (!s.empty()) s += ' ';
      s += format_double(m(i, j));
    }
  return s;
}

/**
 * Replica study of the normalized error at the tail iteration. Only final
 * states are kept (one trace row per replica).
 */
inline CltOutcome run_clt_study(const ExperimentSpec& spec) {
  if (spec.replicas < 100)
    throw ConfigError("CLT study needs replicas >= 100, got " + std::to_string(spec.replicas));
  RunConfig config = build_run_config(spec);
  if (!config.problem.clt)
    throw ConfigError("problem has no CLT data (needs an unconstrained quadratic with noise)");
  const std::uint64_t tail = spec.clt.tail_iteration ? spec.clt.tail_iteration : spec.n_iter;
  config.n_iter = tail;
  config.record_every = tail;

  auto results = run_replicas(
      config,
      [&](std::uint64_t r) { return initial_state(spec, config.problem.constraint, r); },
      spec.threads);
  std::vector<StackedIterate> finals;
  finals.reserve(results.size());
  for (auto& r : results) finals.push_back(std::move(r.final_state));

  CltOutcome out;
  out.estimate = clt_check(finals, *config.problem.clt, spec.schedule.gamma0,
                           spec.schedule.xi, tail, spec.clt.radius);
  const auto& e = out.estimate;
  out.summary = {{"problem", to_string(spec.problem)},
                 {"seed", std::to_string(spec.seed)},
                 {"replicas", std::to_string(spec.replicas)},
                 {"replicas_used", std::to_string(e.n_replicas_used)},
                 {"tail_iteration", std::to_string(tail)},
                 {"gamma0", format_double(spec.schedule.gamma0)},
                 {"xi", format_double(spec.schedule.xi)},
                 {"zeta", format_double(e.zeta)},
                 {"theoretical_cov", format_matrix(e.theoretical_cov)},
                 {"empirical_cov", format_matrix(e.empirical_cov)},
                 {"relative_error", format_double(e.relative_error)},
                 {"max_agent_deviation", format_double(e.max_agent_deviation)},
                 {"degenerate", e.degenerate ? "true" : "false"},
                 {"validation", validation_status(config)}};
  const std::filesystem::path dir(spec.output_dir);
  std::filesystem::create_directories(dir);
  out.summary_file = dir / "summary.txt";
  write_summary(out.summary_file, out.summary);
  return out;
}

}  // namespace dsa::experiment
