#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dsa/quadratic.hpp"
#include "dsa/sa_core.hpp"

namespace {

using dsa::ConstraintSet;
using dsa::StackedIterate;
using Eigen::MatrixXd;
using Eigen::VectorXd;

dsa::Graph paper_graph() { return dsa::Graph(4, {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}}); }

StackedIterate row(std::initializer_list<double> v) {
  MatrixXd m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) m(0, k++) = x;
  return StackedIterate(m);
}

dsa::RunConfig quadratic_config(double sigma, std::uint64_t n_iter) {
  MatrixXd centers(2, 4);
  centers << 1, 3, -2, 2, 2, -1, 0, 3;
  dsa::RunConfig c;
  c.problem = dsa::quadratic_problem(centers, sigma, ConstraintSet::unconstrained(2));
  c.gossip = {paper_graph(), {1.0, 0.0}};
  c.schedule = {0.5, 0.75};
  c.n_iter = n_iter;
  c.seed = 7;
  MatrixXd init(2, 4);
  init << 5, -3, 0, 2, 1, 4, -6, 0;
  c.initial = StackedIterate(init);
  c.record_every = 10;
  return c;
}

TEST(StepSchedule, ClosedFormAndMonotone) {
  const dsa::StepSchedule s{0.5, 0.75};
  EXPECT_EQ(s(1), 0.5);
  EXPECT_DOUBLE_EQ(s(16), 0.5 / 8.0);
  for (std::uint64_t n = 1; n < 1000; ++n) {
    EXPECT_GT(s(n), 0.0);
    EXPECT_LT(s(n + 1), s(n));
  }
}

TEST(LocalStep, SpecExamples) {
  const auto free1 = ConstraintSet::unconstrained(1);
  const auto prev = row({0.2, 0.4});
  EXPECT_EQ(dsa::local_step(prev, row({0, 0}), 0.3, free1), prev);
  const auto next = dsa::local_step(prev, row({1, -1}), 0.1, free1);
  EXPECT_NEAR(next.blocks()(0, 0), 0.3, 1e-15);
  EXPECT_NEAR(next.blocks()(0, 1), 0.3, 1e-15);
  const auto box = ConstraintSet::box(VectorXd::Zero(1), VectorXd::Ones(1));
  EXPECT_EQ(dsa::local_step(row({0.9}), row({0.5}), 1.0, box), row({1.0}));
}

TEST(LocalStep, RejectsNonFiniteObservationNamingAgent) {
  const auto free1 = ConstraintSet::unconstrained(1);
  try {
    dsa::local_step(row({0, 0, 0}), row({0, std::nan(""), 0}), 0.1, free1);
    FAIL() << "expected RunAborted";
  } catch (const dsa::RunAborted& e) {
    EXPECT_NE(std::string(e.what()).find("agent 2"), std::string::npos);
  }
  EXPECT_THROW(dsa::local_step(row({0}), row({0}), 0.0, free1), dsa::ArgumentError);
}

TEST(GossipStep, SpecExamples) {
  const auto theta = row({0, 2, 5});
  EXPECT_EQ(dsa::gossip_step(theta, dsa::GossipMatrix::identity(3)), theta);
  EXPECT_EQ(dsa::gossip_step(theta, dsa::pairwise_matrix(0, 1, 3)), row({1, 1, 5}));
  const dsa::GossipMatrix full(MatrixXd::Constant(3, 3, 1.0 / 3.0));
  const auto avg = dsa::gossip_step(theta, full);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(avg.blocks()(0, i), 7.0 / 3.0, 1e-15);
}

TEST(GossipStep, MatchesKroneckerProduct) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + gen() % 5, d = 1 + gen() % 3;
    MatrixXd b(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
    for (auto& x : b.reshaped()) x = normal(gen);
    const StackedIterate theta(b);
    const std::size_t i = gen() % n, j = (i + 1 + gen() % (n - 1)) % n;
    const auto w = dsa::pairwise_matrix(i, j, n);
    // Explicit (W (x) I_d) acting on the stacked vector.
    const auto nd = static_cast<Eigen::Index>(n * d);
    MatrixXd kron = MatrixXd::Zero(nd, nd);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        kron.block(static_cast<Eigen::Index>(r * d), static_cast<Eigen::Index>(c * d),
                   static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)) =
            w(r, c) * MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    const VectorXd expected = kron * theta.stacked();
    EXPECT_LT((dsa::gossip_step(theta, w).stacked() - expected).norm(), 1e-14);
    // Dense path agrees with the pairwise fast path.
    const dsa::GossipMatrix dense(w.entries());
    EXPECT_LT((dsa::gossip_step(theta, dense).stacked() - expected).norm(), 1e-14);
  }
}

TEST(GossipStep, RejectsSizeMismatch) {
  EXPECT_THROW(dsa::gossip_step(row({0, 1}), dsa::pairwise_matrix(0, 1, 3)), dsa::ArgumentError);
}

TEST(RmIterate, TwoAgentHandComputed) {
  MatrixXd centers(1, 2);
  centers << 0, 4;
  dsa::RunConfig c;
  c.problem = dsa::quadratic_problem(centers, 0.0, ConstraintSet::unconstrained(1));
  // The only edge is always active, so W_1 = W_{1,2}.
  c.gossip = {dsa::Graph(2, {{0, 1}}), {1.0, 0.0}};
  c.schedule = {0.5, 0.75};
  c.seed = 1;
  EXPECT_EQ(dsa::rm_iterate(row({0, 0}), 1, c), row({1, 1}));
  EXPECT_THROW(dsa::rm_iterate(row({0, 0}), 0, c), dsa::ArgumentError);
}

TEST(RmIterate, NoGossipGivesIndependentDescent) {
  auto c = quadratic_config(0.0, 10);
  c.gossip.laziness = {0.0, 0.0};
  StackedIterate theta = c.initial;
  StackedIterate manual = c.initial;
  const MatrixXd centers = [] {
    MatrixXd m(2, 4);
    m << 1, 3, -2, 2, 2, -1, 0, 3;
    return m;
  }();
  for (std::uint64_t n = 1; n <= 50; ++n) {
    theta = dsa::rm_iterate(theta, n, c);
    const double g = c.schedule(n);
    manual.blocks() += g * (centers - manual.blocks());
  }
  EXPECT_LT((theta.blocks() - manual.blocks()).norm(), 1e-12);
}

TEST(RmIterate, FullAveragingMatchesCentralizedProjectedDescent) {
  // Identical agents f_i = |theta - c|^2 / 2, box constraint, W = 11^T / N.
  MatrixXd centers(2, 3);
  centers << 2, 2, 2, -0.5, -0.5, -0.5;
  const auto box = ConstraintSet::box(VectorXd::Zero(2), VectorXd::Ones(2));
  const auto problem = dsa::quadratic_problem(centers, 0.0, box);
  const dsa::GossipMatrix full(MatrixXd::Constant(3, 3, 1.0 / 3.0));
  const dsa::StepSchedule s{0.3, 0.8};
  MatrixXd init(2, 3);
  init << 0.1, 0.9, 0.5, 0.2, 0.4, 0.9;
  StackedIterate theta(init);
  VectorXd central = dsa::network_average(theta);
  dsa::Rng rng(1);
  MatrixXd y(2, 3);
  for (std::uint64_t n = 1; n <= 100; ++n) {
    problem.oracle(theta.blocks(), n, rng, y);
    theta = dsa::gossip_step(dsa::local_step(theta, StackedIterate(y), s(n), box), full);
    if (n == 1) {
      // First step projects distinct blocks; afterwards all agents agree.
      central = dsa::network_average(theta);
      continue;
    }
    central = box.project(central + s(n) * (centers.col(0) - central));
    for (int i = 0; i < 3; ++i)
      EXPECT_LT((VectorXd(theta.block(static_cast<std::size_t>(i))) - central).norm(), 1e-12);
  }
}

TEST(RmIterate, PreservesAverageUnderGossipAlone) {
  auto c = quadratic_config(0.3, 10);
  StackedIterate theta = c.initial;
  for (std::uint64_t n = 1; n <= 200; ++n) {
    auto pair = dsa::draw_exchange(c.gossip, n, c.seed);
    if (!pair) continue;
    const auto before = dsa::network_average(theta);
    theta = dsa::gossip_step(theta, dsa::GossipMatrix::pairwise(*pair, 4));
    EXPECT_LT((dsa::network_average(theta) - before).norm(), 1e-12);
  }
}

TEST(Run, RecordsScheduleAndIsDeterministic) {
  auto c = quadratic_config(0.1, 105);
  const auto a = dsa::run(c);
  const auto b = dsa::run(c);
  ASSERT_EQ(a.trace.size(), 11u);
  EXPECT_EQ(a.trace.front().n, 10u);
  EXPECT_EQ(a.trace.back().n, 105u);
  EXPECT_EQ(a.final_state, b.final_state);
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    EXPECT_EQ(a.trace[k].disagreement, b.trace[k].disagreement);
    EXPECT_EQ(a.trace[k].average, b.trace[k].average);
    EXPECT_GE(a.trace[k].disagreement, 0.0);
    EXPECT_GE(a.trace[k].residual, 0.0);
  }
  // A different replica draws different noise.
  EXPECT_NE(dsa::run(c, 1).final_state, a.final_state);
}

TEST(Run, RmIterateReproducesRun) {
  auto c = quadratic_config(0.2, 60);
  StackedIterate theta = c.initial;
  for (std::uint64_t n = 1; n <= 60; ++n) theta = dsa::rm_iterate(theta, n, c, 3);
  EXPECT_EQ(theta, dsa::run(c, 3).final_state);
}

TEST(Run, ConfigErrors) {
  auto c = quadratic_config(0.1, 0);
  EXPECT_THROW(dsa::run(c), dsa::ConfigError);
  c.n_iter = 10;
  c.record_every = 0;
  EXPECT_THROW(dsa::run(c), dsa::ConfigError);
  c.record_every = 1;
  c.schedule.xi = 0.4;
  EXPECT_THROW(dsa::run(c), dsa::ConfigError);
  c.override_validation = true;
  EXPECT_NO_THROW(dsa::run(c));

  auto infeasible = quadratic_config(0.1, 10);
  MatrixXd centers = MatrixXd::Zero(2, 4);
  infeasible.problem = dsa::quadratic_problem(
      centers, 0.1, ConstraintSet::box(VectorXd::Zero(2), VectorXd::Ones(2)));
  EXPECT_THROW(dsa::run(infeasible), dsa::ConfigError);
}

TEST(Run, DivergenceGuardAbortsWithTrace) {
  auto c = quadratic_config(0.0, 1000);
  // Oracle pushing away from the center: theta grows geometrically.
  c.problem.oracle = [](const MatrixXd& blocks, std::uint64_t, dsa::Rng&, MatrixXd& out) {
    out = 1e3 * (blocks.array() + 1.0).matrix();
  };
  c.schedule = {1.0, 0.75};
  try {
    dsa::run(c);
    FAIL() << "expected RunAborted";
  } catch (const dsa::RunAborted& e) {
    EXPECT_GT(e.iteration(), 1u);
    EXPECT_LT(e.iteration(), 1000u);
    EXPECT_EQ(e.trace().size(), (e.iteration() - 1) / 10);
  }
}

TEST(Run, NonFiniteOracleAborts) {
  auto c = quadratic_config(0.0, 100);
  c.problem.oracle = [](const MatrixXd& blocks, std::uint64_t n, dsa::Rng&, MatrixXd& out) {
    out = MatrixXd::Zero(blocks.rows(), blocks.cols());
    if (n == 37) out(1, 2) = std::numeric_limits<double>::infinity();
  };
  try {
    dsa::run(c);
    FAIL() << "expected RunAborted";
  } catch (const dsa::RunAborted& e) {
    EXPECT_EQ(e.iteration(), 37u);
    EXPECT_NE(std::string(e.what()).find("agent 3"), std::string::npos);
    EXPECT_EQ(e.trace().size(), 3u);
  }
}

TEST(Run, ConstrainedBlocksStayFeasible) {
  MatrixXd centers(2, 4);
  centers << 1.5, 2.0, 1.8, 1.7, 0.2, 0.8, 0.4, 0.6;
  const auto box = ConstraintSet::box(VectorXd::Zero(2), VectorXd::Ones(2));
  dsa::RunConfig c;
  c.problem = dsa::quadratic_problem(centers, 0.5, box);
  c.gossip = {paper_graph(), {1.0, 0.0}};
  c.schedule = {0.5, 0.75};
  c.seed = 3;
  c.initial = StackedIterate(MatrixXd::Constant(2, 4, 0.5));
  StackedIterate theta = c.initial;
  for (std::uint64_t n = 1; n <= 2000; ++n) {
    theta = dsa::rm_iterate(theta, n, c);
    for (std::size_t i = 0; i < 4; ++i) {
      const VectorXd b = theta.block(i);
      ASSERT_TRUE(box.contains(b, dsa::default_active_tolerance(b)));
    }
  }
}

TEST(RunReplicas, OrderedAndThreadIndependent) {
  auto c = quadratic_config(0.3, 200);
  c.replicas = 6;
  auto init = [&](std::uint64_t r) {
    return StackedIterate(c.initial.blocks().array() + static_cast<double>(r));
  };
  const auto serial = dsa::run_replicas(c, init, 1);
  const auto parallel = dsa::run_replicas(c, init, 3);
  ASSERT_EQ(serial.size(), 6u);
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(serial[r].final_state, parallel[r].final_state);
    EXPECT_EQ(serial[r].initial, init(r));
    auto single = c;
    single.initial = init(r);
    EXPECT_EQ(dsa::run(single, r).final_state, serial[r].final_state);
  }
}

TEST(Oracle, GaussianNoiseIsUnbiased) {
  MatrixXd centers(2, 3);
  centers << 1, -1, 0.5, 2, 0, -3;
  const double sigma = 0.7;
  const auto p = dsa::quadratic_problem(centers, sigma, ConstraintSet::unconstrained(2));
  MatrixXd theta(2, 3);
  theta << 0.3, 0.1, -0.2, 0.0, 1.0, 2.0;
  const MatrixXd expected = centers - theta;
  const int draws = 100000;
  MatrixXd sum = MatrixXd::Zero(2, 3), y(2, 3);
  for (int k = 0; k < draws; ++k) {
    dsa::Rng rng = dsa::make_stream(11, 0, dsa::StreamTag::kNoise, static_cast<std::uint64_t>(k));
    p.oracle(theta, 1, rng, y);
    sum += y;
  }
  const MatrixXd err = sum / draws - expected;
  // Per-agent bound from the spec, 4 sigma / sqrt(draws) scaled by sqrt(d).
  for (int i = 0; i < 3; ++i)
    EXPECT_LE(err.col(i).norm(), 4.0 * sigma * std::sqrt(2.0) / std::sqrt(draws));
}

TEST(Oracle, GenericGaussianOracleMatchesGradient) {
  auto grad = [](std::size_t i, const VectorXd& t) {
    return VectorXd(t * static_cast<double>(i + 1));
  };
  const auto oracle = dsa::gaussian_oracle(grad, {0.0, {}});
  MatrixXd theta(1, 2), y(1, 2);
  theta << 1.0, 2.0;
  dsa::Rng rng(1);
  oracle(theta, 1, rng, y);
  EXPECT_EQ(y(0, 0), -1.0);
  EXPECT_EQ(y(0, 1), -4.0);
}

TEST(ValidateAssumptions, SpecExamples) {
  const dsa::GossipModel g{paper_graph(), {1.0, 0.0}};
  EXPECT_TRUE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 0.75}, g, std::nullopt).all_passed());

  const dsa::CltSpec clt{VectorXd::Zero(1), -MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1)};
  const auto r = dsa::validate_assumptions(dsa::StepSchedule{0.4, 1.0}, g, clt);
  EXPECT_FALSE(r.all_passed());
  EXPECT_NE(r.failures().find("2 L gamma0 > 1"), std::string::npos);
  EXPECT_NE(r.failures().find("0.8"), std::string::npos);

  const dsa::GossipModel lazy{paper_graph(), {1.0, 0.3}};
  const auto r2 = dsa::validate_assumptions(dsa::StepSchedule{1.0, 0.6}, lazy, std::nullopt);
  EXPECT_FALSE(r2.all_passed());
  EXPECT_NE(r2.failures().find("eta"), std::string::npos);
  EXPECT_NE(r2.failures().find("0.3"), std::string::npos);
}

TEST(ValidateAssumptions, ConnectivityAndXiRange) {
  const dsa::GossipModel split{dsa::Graph(4, {{0, 1}, {2, 3}}), {1.0, 0.0}};
  EXPECT_FALSE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 0.75}, split, std::nullopt).all_passed());
  const dsa::GossipModel off{paper_graph(), {0.0, 0.0}};
  EXPECT_FALSE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 0.75}, off, std::nullopt).all_passed());
  const dsa::GossipModel g{paper_graph(), {1.0, 0.0}};
  EXPECT_FALSE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 0.5}, g, std::nullopt).all_passed());
  EXPECT_FALSE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 1.1}, g, std::nullopt).all_passed());
  EXPECT_TRUE(dsa::validate_assumptions(dsa::StepSchedule{1.0, 1.0}, g, std::nullopt).all_passed());
}

}  // namespace
