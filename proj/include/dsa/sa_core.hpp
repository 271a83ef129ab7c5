#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dsa/constraints.hpp"
#include "dsa/diagnostics.hpp"
#include "dsa/errors.hpp"
#include "dsa/gossip.hpp"
#include "dsa/rng.hpp"
#include "dsa/stacked.hpp"

namespace dsa {

/// gamma_n = gamma0 n^{-xi}, n >= 1.
struct StepSchedule {
  double gamma0 = 1.0;
  double xi = 0.75;

  double operator()(std::uint64_t n) const {
    return gamma0 * std::pow(static_cast<double>(n), -xi);
  }

  friend bool operator==(const StepSchedule&, const StepSchedule&) = default;
};

/**
 * Observation oracle: given the blocks theta_{n-1} (d x N) and iteration n,
 * writes Y_n (d x N) into `out`. All randomness must come from `rng`.
 */
using Oracle = std::function<void(const Eigen::MatrixXd& blocks, std::uint64_t n,
                                  Rng& rng, Eigen::MatrixXd& out)>;

using LocalGradient =
    std::function<Eigen::VectorXd(std::size_t agent, const Eigen::VectorXd&)>;

/// Additive Gaussian perturbation sigma * s(theta_i) * N(0, I), independent
/// across agents given the past. `state_scale` defaults to 1.
struct NoiseModel {
  double sigma = 0.0;
  std::function<double(const Eigen::VectorXd&)> state_scale;
};

/// Y_{n,i} = -grad f_i(theta_{n-1,i}) + noise.
inline Oracle gaussian_oracle(LocalGradient gradient, NoiseModel noise) {
  return [gradient = std::move(gradient), noise = std::move(noise)](
             const Eigen::MatrixXd& blocks, std::uint64_t, Rng& rng,
             Eigen::MatrixXd& out) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < blocks.cols(); ++i) {
      const Eigen::VectorXd theta_i = blocks.col(i);
      out.col(i) = -gradient(static_cast<std::size_t>(i), theta_i);
      if (noise.sigma == 0.0) continue;
      double s = noise.sigma;
      if (noise.state_scale) s *= noise.state_scale(theta_i);
      for (Eigen::Index k = 0; k < blocks.rows(); ++k) out(k, i) += s * normal(rng);
    }
  };
}

struct Problem {
  std::size_t dimension = 0;
  std::size_t agents = 0;
  /// grad f_i, used for diagnostics.
  LocalGradient local_gradient;
  Oracle oracle;
  ConstraintSet constraint;
  std::optional<CltSpec> clt;
  /// grad f(theta) with f = sum_i f_i. Defaults to summing local_gradient.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> aggregate_gradient;
  /// Reported in the trace objective column; must be deterministic.
  std::function<double(const Eigen::VectorXd&)> objective;

  Eigen::VectorXd gradient_of_sum(const Eigen::VectorXd& theta) const {
    if (aggregate_gradient) return aggregate_gradient(theta);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
    for (std::size_t i = 0; i < agents; ++i) g += local_gradient(i, theta);
    return g;
  }
};

struct RunConfig {
  Problem problem;
  GossipModel gossip;
  StepSchedule schedule;
  std::uint64_t n_iter = 1;
  std::uint64_t seed = 0;
  StackedIterate initial;
  std::size_t replicas = 1;
  std::uint64_t record_every = 10;
  /// Run even when validate_assumptions reports a failure.
  bool override_validation = false;
};

/// Run stopped early: non-finite observation or divergence guard.
class RunAborted : public std::runtime_error {
 public:
  RunAborted(const std::string& what, std::uint64_t iteration, Trace trace)
      : std::runtime_error(what),
        iteration_(iteration),
        trace_(std::make_shared<Trace>(std::move(trace))) {}

  std::uint64_t iteration() const { return iteration_; }
  const Trace& trace() const { return *trace_; }

 private:
  std::uint64_t iteration_;
  std::shared_ptr<Trace> trace_;
};

/// Divergence guard on |theta_n|.
inline constexpr double kDivergenceBound = 1e12;

namespace detail {

inline void check_observation(const Eigen::MatrixXd& y, std::uint64_t n) {
  if (y.allFinite()) return;
  for (Eigen::Index i = 0; i < y.cols(); ++i)
    if (!y.col(i).allFinite())
      throw RunAborted("non-finite observation at iteration " + std::to_string(n) +
                           ", agent " + std::to_string(i + 1),
                       n, {});
}

inline void local_step_in_place(Eigen::MatrixXd& blocks, const Eigen::MatrixXd& y,
                                double gamma, const ConstraintSet& set) {
  blocks.noalias() += gamma * y;
  if (set.is_unconstrained()) return;
  for (Eigen::Index i = 0; i < blocks.cols(); ++i) set.project_in_place(blocks.col(i));
}

inline void average_pair(Eigen::MatrixXd& blocks, const Edge& e) {
  const auto i = static_cast<Eigen::Index>(e.first);
  const auto j = static_cast<Eigen::Index>(e.second);
  blocks.col(i) = 0.5 * (blocks.col(i) + blocks.col(j));
  blocks.col(j) = blocks.col(i);
}

}  // namespace detail

/// Block i becomes P_G[theta_{n-1,i} + gamma Y_{n,i}].
inline StackedIterate local_step(const StackedIterate& previous,
                                 const StackedIterate& observation, double gamma,
                                 const ConstraintSet& set) {
  if (!(gamma > 0.0)) throw ArgumentError("step size must be positive");
  if (observation.dimension() != previous.dimension() ||
      observation.agents() != previous.agents())
    throw ArgumentError("observation shape does not match the iterate");
  detail::check_observation(observation.blocks(), 0);
  StackedIterate next = previous;
  detail::local_step_in_place(next.blocks(), observation.blocks(), gamma, set);
  return next;
}

/// theta_i = sum_j w(i, j) theta_tilde_j, i.e. (W (x) I_d) theta_tilde.
inline StackedIterate gossip_step(const StackedIterate& tilde,
                                  const GossipMatrix& w) {
  if (w.size() != tilde.agents())
    throw ArgumentError("gossip matrix size does not match the agent count");
  if (w.is_identity()) return tilde;
  if (w.pair()) {
    StackedIterate out = tilde;
    detail::average_pair(out.blocks(), *w.pair());
    return out;
  }
  return StackedIterate(tilde.blocks() * w.entries().transpose());
}

/// One named condition from validate_assumptions.
struct AssumptionCheck {
  std::string name;
  bool passed = true;
  std::string detail;
};

struct AssumptionReport {
  std::vector<AssumptionCheck> checks;

  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }

  std::string failures() const {
    std::string out;
    for (const auto& c : checks) {
      if (c.passed) continue;
      if (!out.empty()) out += "; ";
      out += c.name + " (" + c.detail + ")";
    }
    return out;
  }
};

inline std::string format_number(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

/**
 * Step-size and network conditions: xi in (1/2, 1], eta < xi - 1/2 for the
 * laziness exponent, a connected graph with active gossip (rho < 1), and,
 * when a CLT point is given and xi = 1, 2 L gamma0 > 1.
 */
inline AssumptionReport validate_assumptions(const StepSchedule& schedule,
                                             const GossipModel& gossip,
                                             const std::optional<CltSpec>& clt) {
  AssumptionReport report;
  const double xi = schedule.xi;
  const double eta = gossip.laziness.eta;

  report.checks.push_back({"gamma0 > 0", schedule.gamma0 > 0.0,
                           "gamma0 = " + format_number(schedule.gamma0)});
  report.checks.push_back({"xi in (1/2, 1]", xi > 0.5 && xi <= 1.0,
                           "xi = " + format_number(xi)});
  report.checks.push_back(
      {"0 <= eta < xi - 1/2", eta >= 0.0 && eta < xi - 0.5,
       "eta = " + format_number(eta) + ", xi - 1/2 = " + format_number(xi - 0.5)});
  const bool connected = is_connected(gossip.graph);
  const bool active = gossip.laziness.c > 0.0;
  report.checks.push_back(
      {"graph connected (rho < 1)", connected && active,
       connected ? (active ? "connected" : "gossip disabled (c = 0)")
                 : "graph is not connected"});
  if (clt) {
    const double l = clt->decay_rate();
    report.checks.push_back({"mean-field Jacobian stable", l > 0.0,
                             "L = " + format_number(l)});
    report.checks.push_back({"noise covariance Q positive definite",
                             clt->noise_positive_definite(), "Q at theta*"});
    if (xi == 1.0)
      report.checks.push_back(
          {"2 L gamma0 > 1", 2.0 * l * schedule.gamma0 > 1.0,
           "2 L gamma0 = " + format_number(2.0 * l * schedule.gamma0)});
  }
  return report;
}

inline AssumptionReport validate_assumptions(const RunConfig& config) {
  return validate_assumptions(config.schedule, config.gossip, config.problem.clt);
}

inline TraceRecord make_record(const Problem& problem, const StackedIterate& state,
                               std::uint64_t n, double gamma) {
  TraceRecord rec;
  rec.n = n;
  rec.gamma = gamma;
  rec.average = network_average(state);
  rec.disagreement = disagreement_norm(state);
  const Eigen::VectorXd grad = problem.gradient_of_sum(rec.average);
  rec.residual = problem.constraint.is_unconstrained()
                     ? grad.norm()
                     : kt_residual(problem.constraint, rec.average, grad).value;
  if (problem.objective) rec.objective = problem.objective(rec.average);
  return rec;
}

/**
 * theta_n = (W_n (x) I_d) P_{G^N}[theta_{n-1} + gamma_n Y_n].
 * Y_n and W_n come from independent streams keyed by (seed, replica, n).
 */
inline StackedIterate rm_iterate(const StackedIterate& state, std::uint64_t n,
                                 const RunConfig& config, std::uint64_t replica = 0) {
  if (n < 1) throw ArgumentError("iteration index starts at 1");
  Eigen::MatrixXd blocks = state.blocks();
  Eigen::MatrixXd y(blocks.rows(), blocks.cols());
  Rng noise = make_stream(config.seed, replica, StreamTag::kNoise, n);
  config.problem.oracle(blocks, n, noise, y);
  detail::check_observation(y, n);
  detail::local_step_in_place(blocks, y, config.schedule(n), config.problem.constraint);
  if (auto pair = draw_exchange(config.gossip, n, config.seed, replica))
    detail::average_pair(blocks, *pair);
  return StackedIterate(std::move(blocks));
}

struct RunResult {
  Trace trace;
  StackedIterate initial;
  StackedIterate final_state;
};

inline void check_config(const RunConfig& config) {
  const auto& p = config.problem;
  if (config.n_iter < 1) throw ConfigError("n_iter must be >= 1");
  if (config.record_every < 1) throw ConfigError("record_every must be >= 1");
  if (!p.oracle) throw ConfigError("problem has no observation oracle");
  if (p.constraint.dimension() != p.dimension)
    throw ConfigError("constraint dimension does not match the problem");
  if (config.gossip.n_agents() != p.agents)
    throw ConfigError("graph has " + std::to_string(config.gossip.n_agents()) +
                      " agents, problem has " + std::to_string(p.agents));
  if (config.initial.dimension() != p.dimension || config.initial.agents() != p.agents)
    throw ConfigError("initial iterate has the wrong shape");
  for (std::size_t i = 0; i < p.agents; ++i) {
    const Eigen::VectorXd b = config.initial.block(i);
    if (!p.constraint.contains(b, default_active_tolerance(b)))
      throw ConfigError("initial iterate of agent " + std::to_string(i + 1) +
                        " is not feasible");
  }
  if (!config.override_validation) {
    auto report = validate_assumptions(config);
    if (!report.all_passed())
      throw ConfigError("assumption check failed: " + report.failures());
  }
}

/**
 * Executes n_iter iterations for one replica. Records every record_every
 * iterations and at n_iter. Bit-reproducible given (config, replica).
 */
inline RunResult run(const RunConfig& config, std::uint64_t replica = 0) {
  check_config(config);
  const auto& problem = config.problem;
  RunResult result;
  result.initial = config.initial;
  Eigen::MatrixXd blocks = config.initial.blocks();
  Eigen::MatrixXd y(blocks.rows(), blocks.cols());
  const bool guard = problem.constraint.is_unconstrained();

  for (std::uint64_t n = 1; n <= config.n_iter; ++n) {
    const double gamma = config.schedule(n);
    Rng noise = make_stream(config.seed, replica, StreamTag::kNoise, n);
    problem.oracle(blocks, n, noise, y);
    try {
      detail::check_observation(y, n);
    } catch (const RunAborted& e) {
      throw RunAborted(e.what(), n, std::move(result.trace));
    }
    detail::local_step_in_place(blocks, y, gamma, problem.constraint);
    if (auto pair = draw_exchange(config.gossip, n, config.seed, replica))
      detail::average_pair(blocks, *pair);

    if (guard && !(blocks.norm() <= kDivergenceBound))
      throw RunAborted("divergence: |theta_n| exceeded 1e12 at iteration " +
                           std::to_string(n),
                       n, std::move(result.trace));
    if (n % config.record_every == 0 || n == config.n_iter) {
      result.trace.push_back(make_record(problem, StackedIterate(blocks), n, gamma));
    }
  }
  result.final_state = StackedIterate(std::move(blocks));
  return result;
}

/**
 * Runs `config.replicas` independent replicas. Replica r gets its own streams
 * derived from (seed, r) and, when given, its own initial iterate. Results are
 * ordered by replica index regardless of scheduling.
 */
inline std::vector<RunResult> run_replicas(
    const RunConfig& config,
    const std::function<StackedIterate(std::uint64_t)>& initial_for = {},
    unsigned threads = 0) {
  check_config(config);
  const std::size_t count = config.replicas;
  std::vector<RunResult> results(count);
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t r = next++; r < count; r = next++) {
      try {
        if (initial_for) {
          RunConfig local = config;
          local.initial = initial_for(r);
          results[r] = run(local, r);
        } else {
          results[r] = run(config, r);
        }
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace dsa
