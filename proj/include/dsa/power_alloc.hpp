#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dsa/constraints.hpp"
#include "dsa/errors.hpp"
#include "dsa/gossip.hpp"
#include "dsa/rng.hpp"
#include "dsa/sa_core.hpp"

namespace dsa::power {

/// Law of every channel gain A^{j,i;k}.
struct ChannelDistribution {
  enum class Kind { kExponential, kDeterministic };
  Kind kind = Kind::kExponential;
  double mean = 1.0;

  friend bool operator==(const ChannelDistribution&,
                         const ChannelDistribution&) = default;
};

/**
 * Gains A^{j,i;k} > 0 from transmitter j to the receiver of pair i on
 * subchannel k.
 */
class ChannelRealization {
 public:
  ChannelRealization(std::size_t users, std::size_t subchannels)
      : users_(users), subchannels_(subchannels),
        gains_(users * users * subchannels, 1.0) {}

  std::size_t users() const { return users_; }
  std::size_t subchannels() const { return subchannels_; }

  double& operator()(std::size_t tx, std::size_t rx, std::size_t k) {
    return gains_[(rx * users_ + tx) * subchannels_ + k];
  }
  double operator()(std::size_t tx, std::size_t rx, std::size_t k) const {
    return gains_[(rx * users_ + tx) * subchannels_ + k];
  }

  const std::vector<double>& gains() const { return gains_; }

 private:
  std::size_t users_;
  std::size_t subchannels_;
  std::vector<double> gains_;
};

/// N transmit/receive pairs sharing K subchannels. theta stacks per-user power
/// vectors: p^{i;k} sits at index i K + k.
struct PowerSystem {
  std::size_t subchannels = 2;
  std::vector<double> weights;          // beta_i
  std::vector<double> noise_variances;  // sigma_i^2
  std::vector<double> budgets;          // P_i
  ChannelDistribution channel;

  std::size_t users() const { return weights.size(); }
  std::size_t dimension() const { return subchannels * users(); }
  std::size_t index(std::size_t user, std::size_t k) const {
    return user * subchannels + k;
  }

  void validate() const {
    const std::size_t n = users();
    if (n == 0 || subchannels == 0)
      throw ArgumentError("power system needs users and subchannels");
    if (noise_variances.size() != n || budgets.size() != n)
      throw ArgumentError("weights, noise variances and budgets differ in length");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(weights[i] > 0.0)) throw ArgumentError("weights must be positive");
      if (!(noise_variances[i] > 0.0))
        throw ArgumentError("noise variances must be positive");
      if (!(budgets[i] > 0.0)) throw ArgumentError("budgets must be positive");
    }
    if (!(channel.mean > 0.0)) throw ArgumentError("channel mean must be positive");
  }

  /// Per-user budget simplex {p^i >= 0, sum_k p^{i;k} <= P_i}.
  ConstraintSet feasible_set() const {
    return ConstraintSet::contiguous_budget(subchannels, budgets);
  }

  friend bool operator==(const PowerSystem&, const PowerSystem&) = default;
};

inline ChannelRealization sample_channels(Rng& rng, std::size_t users,
                                          std::size_t subchannels,
                                          const ChannelDistribution& dist) {
  ChannelRealization a(users, subchannels);
  if (dist.kind == ChannelDistribution::Kind::kDeterministic) {
    for (std::size_t rx = 0; rx < users; ++rx)
      for (std::size_t tx = 0; tx < users; ++tx)
        for (std::size_t k = 0; k < subchannels; ++k) a(tx, rx, k) = dist.mean;
    return a;
  }
  std::exponential_distribution<double> exp(1.0 / dist.mean);
  for (std::size_t rx = 0; rx < users; ++rx)
    for (std::size_t tx = 0; tx < users; ++tx)
      for (std::size_t k = 0; k < subchannels; ++k) {
        double g = exp(rng);
        // exponential_distribution can return exactly 0 in theory.
        a(tx, rx, k) = g > 0.0 ? g : std::numeric_limits<double>::min();
      }
  return a;
}

namespace detail {
inline double interference(const PowerSystem& sys, const Eigen::VectorXd& theta,
                           const ChannelRealization& a, std::size_t i,
                           std::size_t k) {
  double s = sys.noise_variances[i];
  for (std::size_t j = 0; j < sys.users(); ++j)
    if (j != i) s += a(j, i, k) * theta(static_cast<Eigen::Index>(sys.index(j, k)));
  return s;
}
}  // namespace detail

/// R_i = sum_k log(1 + A^{i,i;k} p^{i;k} / (sigma_i^2 + sum_{j!=i} A^{j,i;k} p^{j;k})).
inline double rate(const PowerSystem& sys, const Eigen::VectorXd& theta,
                   const ChannelRealization& a, std::size_t i) {
  double r = 0.0;
  for (std::size_t k = 0; k < sys.subchannels; ++k) {
    const double signal = a(i, i, k) * theta(static_cast<Eigen::Index>(sys.index(i, k)));
    r += std::log1p(signal / detail::interference(sys, theta, a, i, k));
  }
  return r;
}

/// Gradient of R_i with respect to every user's powers.
inline Eigen::VectorXd rate_gradient(const PowerSystem& sys,
                                     const Eigen::VectorXd& theta,
                                     const ChannelRealization& a, std::size_t i) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
  for (std::size_t k = 0; k < sys.subchannels; ++k) {
    const double in = detail::interference(sys, theta, a, i, k);
    const double signal = a(i, i, k) * theta(static_cast<Eigen::Index>(sys.index(i, k)));
    const double total = in + signal;
    grad(static_cast<Eigen::Index>(sys.index(i, k))) = a(i, i, k) / total;
    const double cross = -signal / (in * total);
    for (std::size_t j = 0; j < sys.users(); ++j)
      if (j != i) grad(static_cast<Eigen::Index>(sys.index(j, k))) = cross * a(j, i, k);
  }
  return grad;
}

inline double weighted_sum_rate(const PowerSystem& sys, const Eigen::VectorXd& theta,
                                const ChannelRealization& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < sys.users(); ++i) s += sys.weights[i] * rate(sys, theta, a, i);
  return s;
}

struct ObjectiveEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of sum_i beta_i E[R_i(theta, A^i)].
inline ObjectiveEstimate estimate_objective(const PowerSystem& sys,
                                            const Eigen::VectorXd& theta,
                                            std::size_t trials, Rng& rng) {
  if (trials < 1) throw ArgumentError("need at least one Monte-Carlo trial");
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto a = sample_channels(rng, sys.users(), sys.subchannels, sys.channel);
    const double v = weighted_sum_rate(sys, theta, a);
    sum += v;
    sum_sq += v * v;
  }
  const double m = static_cast<double>(trials);
  ObjectiveEstimate est;
  est.mean = sum / m;
  if (trials > 1) {
    const double var = std::max(0.0, (sum_sq - m * est.mean * est.mean) / (m - 1.0));
    est.std_error = std::sqrt(var / m);
  }
  return est;
}

/// Monte-Carlo estimate of grad_theta sum_i beta_i E[R_i(theta, A^i)].
inline Eigen::VectorXd estimate_utility_gradient(const PowerSystem& sys,
                                                 const Eigen::VectorXd& theta,
                                                 std::size_t trials, Rng& rng) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
  for (std::size_t t = 0; t < trials; ++t) {
    const auto a = sample_channels(rng, sys.users(), sys.subchannels, sys.channel);
    for (std::size_t i = 0; i < sys.users(); ++i)
      g += sys.weights[i] * rate_gradient(sys, theta, a, i);
  }
  return g / static_cast<double>(trials);
}

/**
 * Y_{n,i} = beta_i grad R_i(theta_{n-1,i}, A^i_n), with one fresh channel
 * realization per iteration shared by all agents. Ascent on the sum rate is
 * descent on f_i = -beta_i E[R_i].
 */
inline Oracle stochastic_oracle(PowerSystem sys) {
  sys.validate();
  return [sys = std::move(sys)](const Eigen::MatrixXd& blocks, std::uint64_t,
                                Rng& rng, Eigen::MatrixXd& out) {
    if (static_cast<std::size_t>(blocks.cols()) != sys.users() ||
        static_cast<std::size_t>(blocks.rows()) != sys.dimension())
      throw ArgumentError("power oracle expects N blocks of dimension K N");
    const auto a = sample_channels(rng, sys.users(), sys.subchannels, sys.channel);
    for (std::size_t i = 0; i < sys.users(); ++i) {
      const Eigen::VectorXd theta_i = blocks.col(static_cast<Eigen::Index>(i));
      out.col(static_cast<Eigen::Index>(i)) =
          sys.weights[i] * rate_gradient(sys, theta_i, a, i);
    }
  };
}

/// Monte-Carlo settings for the diagnostics of a power problem.
struct EstimatorSettings {
  std::size_t objective_trials = 1000;
  std::size_t gradient_trials = 1000;
  /// Seed of the common random numbers shared by every diagnostic evaluation.
  std::uint64_t seed = 0;
};

/**
 * Problem wrapper: f_i = -beta_i E[R_i]. Diagnostics (objective column and KT
 * residual) use a fixed channel sample so that they are smooth functions of
 * theta; the objective column reports the sum rate itself.
 */
inline Problem make_problem(const PowerSystem& sys, const EstimatorSettings& est) {
  sys.validate();
  Problem p;
  p.dimension = sys.dimension();
  p.agents = sys.users();
  p.constraint = sys.feasible_set();
  p.oracle = stochastic_oracle(sys);
  p.local_gradient = [sys, est](std::size_t i, const Eigen::VectorXd& theta) {
    Rng rng = make_stream(est.seed, 0, StreamTag::kGradient);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
    for (std::size_t t = 0; t < est.gradient_trials; ++t) {
      const auto a = sample_channels(rng, sys.users(), sys.subchannels, sys.channel);
      g -= sys.weights[i] * rate_gradient(sys, theta, a, i);
    }
    return Eigen::VectorXd(g / static_cast<double>(est.gradient_trials));
  };
  p.aggregate_gradient = [sys, est](const Eigen::VectorXd& theta) {
    Rng rng = make_stream(est.seed, 0, StreamTag::kGradient);
    return Eigen::VectorXd(-estimate_utility_gradient(sys, theta, est.gradient_trials, rng));
  };
  p.objective = [sys, est](const Eigen::VectorXd& theta) {
    Rng rng = make_stream(est.seed, 0, StreamTag::kObjective);
    return estimate_objective(sys, theta, est.objective_trials, rng).mean;
  };
  return p;
}

/// Per-agent feasible random start: coordinates uniform on [0, P_i / K].
inline StackedIterate random_initial(const PowerSystem& sys, std::size_t agents,
                                     std::uint64_t seed, std::uint64_t replica) {
  Rng rng = make_stream(seed, replica, StreamTag::kInitial);
  StackedIterate theta(sys.dimension(), agents);
  const ConstraintSet set = sys.feasible_set();
  for (std::size_t a = 0; a < agents; ++a) {
    Eigen::VectorXd b(static_cast<Eigen::Index>(sys.dimension()));
    for (std::size_t i = 0; i < sys.users(); ++i)
      for (std::size_t k = 0; k < sys.subchannels; ++k)
        b(static_cast<Eigen::Index>(sys.index(i, k))) =
            rng.uniform() * sys.budgets[i] / static_cast<double>(sys.subchannels);
    theta.block(a) = set.project(b);
  }
  return theta;
}

/// Four pairs, K = 2, beta = (0.3, 0.2, 0.3, 0.2), sigma^2 = (0.1, 0.05, 0.02,
/// 0.1), unit budgets, i.i.d. standard exponential gains.
inline PowerSystem paper_system() {
  PowerSystem sys;
  sys.subchannels = 2;
  sys.weights = {0.3, 0.2, 0.3, 0.2};
  sys.noise_variances = {0.1, 0.05, 0.02, 0.1};
  sys.budgets = {1.0, 1.0, 1.0, 1.0};
  sys.channel = {ChannelDistribution::Kind::kExponential, 1.0};
  return sys;
}

/// Edges 1~2, 1~3, 2~3, 2~4, 3~4 (0-based below), uniform pair probabilities.
inline Graph paper_graph() {
  return Graph(4, {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}});
}

inline constexpr double kScenarioGamma0 = 0.5;
inline constexpr double kScenarioXi = 1.0;
inline constexpr std::uint64_t kScenarioIterations = 10000;
inline constexpr std::uint64_t kScenarioRecordEvery = 100;

inline RunConfig paper_scenario(std::uint64_t seed = 1) {
  const PowerSystem sys = paper_system();
  RunConfig config;
  config.problem = make_problem(sys, EstimatorSettings{1000, 1000, seed});
  config.gossip = GossipModel{paper_graph(), Laziness{1.0, 0.0}};
  config.schedule = StepSchedule{kScenarioGamma0, kScenarioXi};
  config.n_iter = kScenarioIterations;
  config.seed = seed;
  config.initial = random_initial(sys, sys.users(), seed, 0);
  config.replicas = 1;
  config.record_every = kScenarioRecordEvery;
  return config;
}

}  // namespace dsa::power
