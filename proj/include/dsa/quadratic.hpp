#pragma once

#include <cstddef>
#include <random>
#include <utility>

#include <Eigen/Dense>

#include "dsa/constraints.hpp"
#include "dsa/diagnostics.hpp"
#include "dsa/sa_core.hpp"

namespace dsa {

/**
 * f_i(theta) = |theta - c_i|^2 / 2, with c_i the columns of `centers`, and
 * Gaussian observation noise of scale sigma per coordinate.
 *
 * Unconstrained with sigma > 0, the problem carries its CLT data: the averaged
 * mean field is -(theta - c_bar), so the Jacobian is -I and Q = sigma^2 I / N.
 */
inline Problem quadratic_problem(Eigen::MatrixXd centers, double sigma,
                                 ConstraintSet constraint) {
  const auto d = static_cast<std::size_t>(centers.rows());
  const auto n_agents = static_cast<std::size_t>(centers.cols());
  if (d == 0 || n_agents == 0) throw ArgumentError("centers must be non-empty");
  if (!(sigma >= 0.0)) throw ArgumentError("noise sigma must be >= 0");
  if (constraint.dimension() != d)
    throw ArgumentError("constraint dimension does not match the centers");

  Problem p;
  p.dimension = d;
  p.agents = n_agents;
  p.constraint = std::move(constraint);
  p.local_gradient = [centers](std::size_t i, const Eigen::VectorXd& theta) {
    return Eigen::VectorXd(theta - centers.col(static_cast<Eigen::Index>(i)));
  };
  p.oracle = [centers, sigma](const Eigen::MatrixXd& blocks, std::uint64_t, Rng& rng,
                              Eigen::MatrixXd& out) {
    out = centers - blocks;
    if (sigma == 0.0) return;
    std::normal_distribution<double> normal(0.0, sigma);
    for (Eigen::Index i = 0; i < out.cols(); ++i)
      for (Eigen::Index k = 0; k < out.rows(); ++k) out(k, i) += normal(rng);
  };
  const Eigen::VectorXd c_bar = centers.rowwise().mean();
  const double n = static_cast<double>(n_agents);
  p.aggregate_gradient = [c_bar, n](const Eigen::VectorXd& theta) {
    return Eigen::VectorXd(n * (theta - c_bar));
  };
  p.objective = [centers](const Eigen::VectorXd& theta) {
    return 0.5 * (centers.colwise() - theta).squaredNorm();
  };
  if (p.constraint.is_unconstrained() && sigma > 0.0) {
    const auto di = static_cast<Eigen::Index>(d);
    p.clt = CltSpec{c_bar, -Eigen::MatrixXd::Identity(di, di),
                    (sigma * sigma / n) * Eigen::MatrixXd::Identity(di, di)};
  }
  return p;
}

}  // namespace dsa
