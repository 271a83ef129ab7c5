#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dsa/errors.hpp"
#include "dsa/stacked.hpp"

namespace dsa {

/// Network average <theta> = (theta_1 + ... + theta_N) / N.
inline Eigen::VectorXd network_average(const StackedIterate& theta) {
  return theta.blocks().rowwise().mean();
}

/// |J_perp theta| = |theta - 1 (x) <theta>|.
inline double disagreement_norm(const StackedIterate& theta) {
  const Eigen::VectorXd avg = network_average(theta);
  return (theta.blocks().colwise() - avg).norm();
}

/// One row of a run trace.
struct TraceRecord {
  std::uint64_t n = 0;
  double gamma = 0.0;
  double disagreement = 0.0;
  /// |grad f(<theta>)| when unconstrained, the KT residual otherwise.
  double residual = 0.0;
  std::optional<double> objective;
  Eigen::VectorXd average;
};

using Trace = std::vector<TraceRecord>;

struct DecayFit {
  /// Estimated beta in E|J_perp theta_n|^2 ~ n^{-beta}.
  double exponent = 0.0;
  /// False when the trace is identically zero.
  bool defined = true;
  std::size_t points = 0;
};

/**
 * Least-squares slope of log(value) against log(n) over the last
 * `tail_fraction` of the series; returns minus the slope.
 */
inline DecayFit fit_decay_exponent(const std::vector<double>& n,
                                   const std::vector<double>& squared,
                                   double tail_fraction = 0.5) {
  if (n.size() != squared.size())
    throw ArgumentError("iteration and value series differ in length");
  if (!(tail_fraction > 0.0 && tail_fraction <= 1.0))
    throw ArgumentError("tail fraction must be in (0, 1]");
  const auto count = static_cast<std::size_t>(
      std::ceil(tail_fraction * static_cast<double>(n.size())));
  const std::size_t start = n.size() - std::min(count, n.size());

  DecayFit fit;
  if (std::all_of(squared.begin() + static_cast<std::ptrdiff_t>(start),
                  squared.end(), [](double v) { return v == 0.0; })) {
    fit.defined = false;
    return fit;
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t m = 0;
  for (std::size_t k = start; k < n.size(); ++k) {
    if (!(squared[k] > 0.0) || !(n[k] > 0.0)) continue;
    const double x = std::log(n[k]);
    const double y = std::log(squared[k]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++m;
  }
  if (m < 50)
    throw InsufficientDataError("decay fit needs at least 50 positive tail points, got " +
                                std::to_string(m));
  const double md = static_cast<double>(m);
  const double denom = md * sxx - sx * sx;
  if (!(denom > 0.0))
    throw InsufficientDataError("decay fit needs distinct iteration indices");
  fit.exponent = -(md * sxy - sx * sy) / denom;
  fit.points = m;
  return fit;
}

/// Replica average of |J_perp theta_n|^2 at each recorded n. Traces must share
/// their record schedule.
struct MeanSquaredDisagreement {
  std::vector<double> n;
  std::vector<double> value;
};

inline MeanSquaredDisagreement mean_squared_disagreement(
    const std::vector<Trace>& traces) {
  MeanSquaredDisagreement out;
  if (traces.empty()) return out;
  const std::size_t rows = traces.front().size();
  for (const auto& t : traces)
    if (t.size() != rows)
      throw ArgumentError("replica traces have different lengths");
  out.n.resize(rows);
  out.value.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    out.n[r] = static_cast<double>(traces.front()[r].n);
    for (const auto& t : traces) {
      if (t[r].n != traces.front()[r].n)
        throw ArgumentError("replica traces have different record schedules");
      out.value[r] += t[r].disagreement * t[r].disagreement;
    }
    out.value[r] /= static_cast<double>(traces.size());
  }
  return out;
}

inline DecayFit fit_decay_exponent(const std::vector<Trace>& traces,
                                   double tail_fraction = 0.5) {
  auto msd = mean_squared_disagreement(traces);
  return fit_decay_exponent(msd.n, msd.value, tail_fraction);
}

/**
 * Solves (H + zeta I) Sigma + Sigma (H + zeta I)^T = -Q through the d^2 x d^2
 * system (I (x) A + A (x) I) vec(Sigma) = -vec(Q), A = H + zeta I.
 * A must be stable; the solution is then unique.
 */
inline Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& h, double zeta,
                                      const Eigen::MatrixXd& q) {
  const Eigen::Index d = h.rows();
  if (h.cols() != d || q.rows() != d || q.cols() != d || d == 0)
    throw ArgumentError("H and Q must be square with equal size");
  if ((q - q.transpose()).norm() > 1e-10 * (1.0 + q.norm()))
    throw ArgumentError("Q must be symmetric");

  const Eigen::MatrixXd a =
      h + zeta * Eigen::MatrixXd::Identity(d, d);
  Eigen::EigenSolver<Eigen::MatrixXd> eig(a, false);
  for (Eigen::Index k = 0; k < d; ++k) {
    const std::complex<double> lambda = eig.eigenvalues()(k);
    if (!(lambda.real() < 0.0))
      throw NumericalError("H + zeta I is not stable: eigenvalue (" +
                           std::to_string(lambda.real()) + ", " +
                           std::to_string(lambda.imag()) + ")");
  }

  const Eigen::Index dd = d * d;
  Eigen::MatrixXd kron = Eigen::MatrixXd::Zero(dd, dd);
  for (Eigen::Index i = 0; i < d; ++i) {
    // I (x) A: diagonal blocks equal to A.
    kron.block(i * d, i * d, d, d) += a;
    // A (x) I: block (i, j) is a(i, j) I.
    for (Eigen::Index j = 0; j < d; ++j)
      kron.block(i * d, j * d, d, d).diagonal().array() += a(i, j);
  }
  Eigen::VectorXd rhs = -Eigen::Map<const Eigen::VectorXd>(q.data(), dd);
  Eigen::VectorXd vec = kron.fullPivLu().solve(rhs);
  Eigen::MatrixXd sigma = Eigen::Map<Eigen::MatrixXd>(vec.data(), d, d);
  return 0.5 * (sigma + sigma.transpose());
}

/// Frobenius norm of (H + zeta I) Sigma + Sigma (H + zeta I)^T + Q.
inline double lyapunov_residual(const Eigen::MatrixXd& h, double zeta,
                                const Eigen::MatrixXd& q,
                                const Eigen::MatrixXd& sigma) {
  const Eigen::MatrixXd a = h + zeta * Eigen::MatrixXd::Identity(h.rows(), h.cols());
  return (a * sigma + sigma * a.transpose() + q).norm();
}

/// Asymptotic-covariance data for a problem: a limit point, the Jacobian of
/// the averaged mean field there (stable), and the covariance of <Y>.
struct CltSpec {
  Eigen::VectorXd theta_star;
  Eigen::MatrixXd jacobian;
  Eigen::MatrixXd noise_cov;

  /// L = -max Re(eig(jacobian)).
  double decay_rate() const {
    Eigen::EigenSolver<Eigen::MatrixXd> eig(jacobian, false);
    double worst = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < eig.eigenvalues().size(); ++k)
      worst = std::max(worst, eig.eigenvalues()(k).real());
    return -worst;
  }

  bool noise_positive_definite() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(noise_cov,
                                                        Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff() > 1e-14 * (1.0 + noise_cov.norm());
  }
};

inline double clt_zeta(double xi, double gamma0) {
  return xi == 1.0 ? 1.0 / (2.0 * gamma0) : 0.0;
}

struct CltEstimate {
  Eigen::MatrixXd empirical_cov;
  Eigen::MatrixXd theoretical_cov;
  std::size_t n_replicas_used = 0;
  /// |empirical - theoretical|_F / |theoretical|_F, or the absolute error
  /// when the theoretical covariance vanishes.
  double relative_error = 0.0;
  double zeta = 0.0;
  /// Q is not positive definite, so the limit law is degenerate.
  bool degenerate = false;
  /// max over replicas and agents of |g^{-1/2}(theta_i - theta*) - z|.
  double max_agent_deviation = 0.0;
};

/**
 * Compares the spread of gamma_{n_T}^{-1/2}(<theta_{n_T}> - theta*) across
 * replicas with the Lyapunov covariance. Replicas whose average ended farther
 * than `radius` from theta* are dropped (they did not converge to theta*).
 */
inline CltEstimate clt_check(const std::vector<StackedIterate>& finals,
                             const CltSpec& spec, double gamma0, double xi,
                             std::uint64_t tail_iteration, double radius) {
  if (finals.size() < 100)
    throw ArgumentError("CLT check needs at least 100 replicas, got " +
                        std::to_string(finals.size()));
  if (tail_iteration < 1) throw ArgumentError("tail iteration must be >= 1");
  const Eigen::Index d = spec.theta_star.size();
  const double gamma =
      gamma0 * std::pow(static_cast<double>(tail_iteration), -xi);
  const double scale = 1.0 / std::sqrt(gamma);

  CltEstimate est;
  est.zeta = clt_zeta(xi, gamma0);
  est.empirical_cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& theta : finals) {
    if (static_cast<Eigen::Index>(theta.dimension()) != d)
      throw ArgumentError("replica dimension does not match theta*");
    const Eigen::VectorXd avg = network_average(theta);
    if ((avg - spec.theta_star).norm() > radius) continue;
    const Eigen::VectorXd z = scale * (avg - spec.theta_star);
    est.empirical_cov += z * z.transpose();
    for (std::size_t i = 0; i < theta.agents(); ++i) {
      const Eigen::VectorXd zi = scale * (theta.block(i) - spec.theta_star);
      est.max_agent_deviation = std::max(est.max_agent_deviation, (zi - z).norm());
    }
    ++est.n_replicas_used;
  }
  if (est.n_replicas_used < 30)
    throw InsufficientDataError("only " + std::to_string(est.n_replicas_used) +
                                " replicas converged to theta*; need 30");
  est.empirical_cov /= static_cast<double>(est.n_replicas_used);

  est.degenerate = !spec.noise_positive_definite();
  est.theoretical_cov = solve_lyapunov(spec.jacobian, est.zeta, spec.noise_cov);
  const double ref = est.theoretical_cov.norm();
  const double diff = (est.empirical_cov - est.theoretical_cov).norm();
  est.relative_error = ref > 0.0 ? diff / ref : diff;
  return est;
}

}  // namespace dsa
