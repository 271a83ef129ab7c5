#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "dsa/errors.hpp"

namespace dsa {

struct Unconstrained {};

/// lower <= theta <= upper, coordinatewise.
struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

/// Per group g: theta_k >= 0 for k in g, and sum_{k in g} theta_k <= budget_g.
struct BudgetSimplex {
  std::vector<std::vector<std::size_t>> groups;
  std::vector<double> budgets;
};

/// a_j^T theta <= b_j, with a_j the rows of `normals`.
struct Halfspaces {
  Eigen::MatrixXd normals;
  Eigen::VectorXd offsets;
};

namespace detail {

inline bool same_vector(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

inline bool same_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

/// Euclidean projection onto {p >= 0, sum p = total} (sort and threshold).
inline Eigen::VectorXd project_simplex_face(const Eigen::VectorXd& x,
                                            double total) {
  std::vector<double> sorted(x.data(), x.data() + x.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double running = 0.0;
  double threshold = 0.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    running += sorted[k];
    double candidate = (running - total) / static_cast<double>(k + 1);
    if (sorted[k] - candidate > 0.0) threshold = candidate;
  }
  return (x.array() - threshold).max(0.0).matrix();
}

/**
 * Lawson-Hanson nonnegative least squares: argmin_{lambda >= 0} |C lambda - t|.
 */
inline Eigen::VectorXd nnls(const Eigen::MatrixXd& c, const Eigen::VectorXd& t) {
  const Eigen::Index m = c.cols();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(m);
  if (m == 0) return x;
  const double tol = 1e-13 * (1.0 + c.norm()) * (1.0 + t.norm());
  std::vector<bool> passive(static_cast<std::size_t>(m), false);

  auto solve_passive = [&](Eigen::VectorXd& s) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < m; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    Eigen::MatrixXd cp(c.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k)
      cp.col(static_cast<Eigen::Index>(k)) = c.col(idx[k]);
    Eigen::VectorXd sp = cp.colPivHouseholderQr().solve(t);
    s.setZero();
    for (std::size_t k = 0; k < idx.size(); ++k)
      s(idx[k]) = sp(static_cast<Eigen::Index>(k));
  };

  Eigen::VectorXd s(m);
  for (int outer = 0; outer < 3 * static_cast<int>(m) + 10; ++outer) {
    Eigen::VectorXd w = c.transpose() * (t - c * x);
    Eigen::Index best = -1;
    double best_w = tol;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best_w) {
        best_w = w(j);
        best = j;
      }
    }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;

    for (int inner = 0; inner < 3 * static_cast<int>(m) + 10; ++inner) {
      solve_passive(s);
      double alpha = 1.0;
      bool feasible = true;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (passive[static_cast<std::size_t>(j)] && s(j) <= 0.0) {
          feasible = false;
          double denom = x(j) - s(j);
          if (denom > 0.0) alpha = std::min(alpha, x(j) / denom);
        }
      }
      if (feasible) break;
      x += alpha * (s - x);
      for (Eigen::Index j = 0; j < m; ++j) {
        if (passive[static_cast<std::size_t>(j)] && x(j) <= tol) {
          passive[static_cast<std::size_t>(j)] = false;
          x(j) = 0.0;
        }
      }
    }
    for (Eigen::Index j = 0; j < m; ++j)
      x(j) = passive[static_cast<std::size_t>(j)] ? std::max(s(j), 0.0) : 0.0;
  }
  return x;
}

}  // namespace detail

/// Active constraint indices at a point, with the tolerance that defined them.
struct ActiveSet {
  std::vector<std::size_t> indices;
  double tolerance = 0.0;

  bool empty() const { return indices.empty(); }
};

/// Scale-aware activity tolerance: 1e-8 (1 + |theta|).
inline double default_active_tolerance(const Eigen::VectorXd& theta) {
  return 1e-8 * (1.0 + theta.norm());
}

/**
 * Closed convex feasible set G = {theta : q_j(theta) <= 0, j = 1..p} with
 * affine q_j. Constraint indices are ordered as follows:
 *   box             2k is lower_k - theta_k, 2k+1 is theta_k - upper_k
 *   budget_simplex  per group: -theta_k for each member, then the budget
 *   halfspaces      a_j^T theta - b_j
 */
class ConstraintSet {
 public:
  using Kind = std::variant<Unconstrained, Box, BudgetSimplex, Halfspaces>;

  static constexpr std::size_t kMaxHalfspaces = 10;

  ConstraintSet() = default;

  static ConstraintSet unconstrained(std::size_t dimension) {
    return ConstraintSet(dimension, Unconstrained{});
  }

  static ConstraintSet box(Eigen::VectorXd lower, Eigen::VectorXd upper) {
    if (lower.size() != upper.size() || lower.size() == 0)
      throw ArgumentError("box bounds must have equal, nonzero length");
    if (!lower.allFinite() || !upper.allFinite())
      throw ArgumentError("box bounds must be finite");
    if ((lower.array() > upper.array()).any())
      throw InfeasibleError("box has lower > upper");
    auto d = static_cast<std::size_t>(lower.size());
    return ConstraintSet(d, Box{std::move(lower), std::move(upper)});
  }

  static ConstraintSet budget_simplex(
      std::size_t dimension, std::vector<std::vector<std::size_t>> groups,
      std::vector<double> budgets) {
    if (groups.size() != budgets.size() || groups.empty())
      throw ArgumentError("one budget per group is required");
    std::vector<int> seen(dimension, 0);
    for (const auto& g : groups) {
      if (g.empty()) throw ArgumentError("budget group is empty");
      for (auto k : g) {
        if (k >= dimension) throw ArgumentError("group index out of range");
        ++seen[k];
      }
    }
    if (std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; }))
      throw ArgumentError("budget groups must partition the coordinates");
    for (double b : budgets)
      if (!(b > 0.0) || !std::isfinite(b))
        throw ArgumentError("budgets must be positive and finite");
    return ConstraintSet(dimension,
                         BudgetSimplex{std::move(groups), std::move(budgets)});
  }

  /// Consecutive groups of `group_size` coordinates, one budget each.
  static ConstraintSet contiguous_budget(std::size_t group_size,
                                         std::vector<double> budgets) {
    std::vector<std::vector<std::size_t>> groups(budgets.size());
    for (std::size_t g = 0; g < budgets.size(); ++g)
      for (std::size_t k = 0; k < group_size; ++k)
        groups[g].push_back(g * group_size + k);
    const std::size_t d = group_size * budgets.size();
    return budget_simplex(d, std::move(groups), std::move(budgets));
  }

  static ConstraintSet halfspaces(Eigen::MatrixXd normals,
                                  Eigen::VectorXd offsets) {
    if (normals.rows() != offsets.size() || normals.rows() == 0 ||
        normals.cols() == 0)
      throw ArgumentError("halfspaces need matching normals and offsets");
    if (static_cast<std::size_t>(normals.rows()) > kMaxHalfspaces)
      throw ArgumentError("at most 10 halfspaces are supported");
    if (!normals.allFinite() || !offsets.allFinite())
      throw ArgumentError("halfspace data must be finite");
    for (Eigen::Index j = 0; j < normals.rows(); ++j)
      if (normals.row(j).norm() == 0.0)
        throw ArgumentError("halfspace normal must be nonzero");
    auto d = static_cast<std::size_t>(normals.cols());
    ConstraintSet set(d, Halfspaces{std::move(normals), std::move(offsets)});
    // Nonempty iff the projection of the origin exists.
    set.project(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)));
    return set;
  }

  std::size_t dimension() const { return dimension_; }
  const Kind& kind() const { return kind_; }
  bool is_unconstrained() const {
    return std::holds_alternative<Unconstrained>(kind_);
  }

  std::size_t constraint_count() const {
    return std::visit(
        [&](const auto& k) -> std::size_t {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Unconstrained>) {
            return 0;
          } else if constexpr (std::is_same_v<T, Box>) {
            return 2 * dimension_;
          } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
            return dimension_ + k.groups.size();
          } else {
            return static_cast<std::size_t>(k.normals.rows());
          }
        },
        kind_);
  }

  /// q_j(theta) for every constraint j.
  Eigen::VectorXd values(const Eigen::VectorXd& theta) const {
    check_dim(theta);
    Eigen::VectorXd q(static_cast<Eigen::Index>(constraint_count()));
    std::visit(
        [&](const auto& k) {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Box>) {
            for (Eigen::Index i = 0; i < theta.size(); ++i) {
              q(2 * i) = k.lower(i) - theta(i);
              q(2 * i + 1) = theta(i) - k.upper(i);
            }
          } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
            Eigen::Index j = 0;
            for (std::size_t g = 0; g < k.groups.size(); ++g) {
              double sum = 0.0;
              for (auto c : k.groups[g]) {
                auto ci = static_cast<Eigen::Index>(c);
                q(j++) = -theta(ci);
                sum += theta(ci);
              }
              q(j++) = sum - k.budgets[g];
            }
          } else if constexpr (std::is_same_v<T, Halfspaces>) {
            q = k.normals * theta - k.offsets;
          }
        },
        kind_);
    return q;
  }

  /// Gradient of q_j (constant, since every q_j is affine).
  Eigen::VectorXd gradient(std::size_t j) const {
    if (j >= constraint_count())
      throw ArgumentError("constraint index out of range");
    Eigen::VectorXd grad =
        Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension_));
    std::visit(
        [&](const auto& k) {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Box>) {
            grad(static_cast<Eigen::Index>(j / 2)) = (j % 2 == 0) ? -1.0 : 1.0;
          } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
            std::size_t offset = 0;
            for (const auto& group : k.groups) {
              if (j < offset + group.size()) {
                grad(static_cast<Eigen::Index>(group[j - offset])) = -1.0;
                return;
              }
              if (j == offset + group.size()) {
                for (auto c : group) grad(static_cast<Eigen::Index>(c)) = 1.0;
                return;
              }
              offset += group.size() + 1;
            }
          } else if constexpr (std::is_same_v<T, Halfspaces>) {
            grad = k.normals.row(static_cast<Eigen::Index>(j)).transpose();
          }
        },
        kind_);
    return grad;
  }

  bool contains(const Eigen::VectorXd& theta, double tolerance) const {
    if (is_unconstrained()) return theta.allFinite();
    return values(theta).maxCoeff() <= tolerance;
  }

  /// Euclidean projection P_G(x).
  Eigen::VectorXd project(const Eigen::VectorXd& x) const {
    check_dim(x);
    return std::visit(
        [&](const auto& k) -> Eigen::VectorXd {
          using T = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<T, Unconstrained>) {
            return x;
          } else if constexpr (std::is_same_v<T, Box>) {
            return x.cwiseMax(k.lower).cwiseMin(k.upper);
          } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
            return project_budget(k, x);
          } else {
            return project_halfspaces(k, x);
          }
        },
        kind_);
  }

  /// In-place projection of a contiguous block.
  void project_in_place(Eigen::Ref<Eigen::VectorXd> x) const {
    if (std::holds_alternative<Unconstrained>(kind_)) return;
    if (const auto* b = std::get_if<Box>(&kind_)) {
      x = x.cwiseMax(b->lower).cwiseMin(b->upper);
      return;
    }
    Eigen::VectorXd tmp = x;
    x = project(tmp);
  }

  friend bool operator==(const ConstraintSet& a, const ConstraintSet& b) {
    if (a.dimension_ != b.dimension_ || a.kind_.index() != b.kind_.index())
      return false;
    return std::visit(
        [&](const auto& ka) -> bool {
          using T = std::decay_t<decltype(ka)>;
          const auto& kb = std::get<T>(b.kind_);
          if constexpr (std::is_same_v<T, Unconstrained>) {
            return true;
          } else if constexpr (std::is_same_v<T, Box>) {
            return detail::same_vector(ka.lower, kb.lower) &&
                   detail::same_vector(ka.upper, kb.upper);
          } else if constexpr (std::is_same_v<T, BudgetSimplex>) {
            return ka.groups == kb.groups && ka.budgets == kb.budgets;
          } else {
            return detail::same_matrix(ka.normals, kb.normals) &&
                   detail::same_vector(ka.offsets, kb.offsets);
          }
        },
        a.kind_);
  }

 private:
  ConstraintSet(std::size_t dimension, Kind kind)
      : dimension_(dimension), kind_(std::move(kind)) {
    if (dimension_ == 0) throw ArgumentError("dimension must be positive");
  }

  void check_dim(const Eigen::VectorXd& x) const {
    if (static_cast<std::size_t>(x.size()) != dimension_)
      throw ArgumentError("point has dimension " + std::to_string(x.size()) +
                          ", expected " + std::to_string(dimension_));
  }

  static Eigen::VectorXd project_budget(const BudgetSimplex& k,
                                        const Eigen::VectorXd& x) {
    Eigen::VectorXd y(x.size());
    for (std::size_t g = 0; g < k.groups.size(); ++g) {
      const auto& group = k.groups[g];
      Eigen::VectorXd sub(static_cast<Eigen::Index>(group.size()));
      for (std::size_t c = 0; c < group.size(); ++c)
        sub(static_cast<Eigen::Index>(c)) = x(static_cast<Eigen::Index>(group[c]));
      Eigen::VectorXd clipped = sub.cwiseMax(0.0);
      if (clipped.sum() > k.budgets[g])
        clipped = detail::project_simplex_face(sub, k.budgets[g]);
      for (std::size_t c = 0; c < group.size(); ++c)
        y(static_cast<Eigen::Index>(group[c])) =
            clipped(static_cast<Eigen::Index>(c));
    }
    return y;
  }

  // Exact QP by enumeration of candidate active sets: the first subset whose
  // equality-constrained projection is primal and dual feasible is optimal.
  static Eigen::VectorXd project_halfspaces(const Halfspaces& k,
                                            const Eigen::VectorXd& x) {
    const auto p = static_cast<unsigned>(k.normals.rows());
    const double tol = 1e-10 * (1.0 + x.norm() + k.offsets.cwiseAbs().maxCoeff());
    if ((k.normals * x - k.offsets).maxCoeff() <= 0.0) return x;

    std::vector<std::uint32_t> masks(std::size_t{1} << p);
    std::iota(masks.begin(), masks.end(), 0u);
    std::stable_sort(masks.begin(), masks.end(), [](auto a, auto b) {
      return std::popcount(a) < std::popcount(b);
    });
    for (auto mask : masks) {
      if (mask == 0) continue;
      const auto m = static_cast<Eigen::Index>(std::popcount(mask));
      Eigen::MatrixXd a(m, k.normals.cols());
      Eigen::VectorXd b(m);
      Eigen::Index r = 0;
      for (unsigned j = 0; j < p; ++j) {
        if (mask & (1u << j)) {
          a.row(r) = k.normals.row(j);
          b(r) = k.offsets(j);
          ++r;
        }
      }
      Eigen::MatrixXd gram = a * a.transpose();
      Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
      if (lu.rank() < m) continue;
      Eigen::VectorXd lambda = lu.solve(a * x - b);
      if (lambda.minCoeff() < -tol) continue;
      Eigen::VectorXd y = x - a.transpose() * lambda;
      if ((k.normals * y - k.offsets).maxCoeff() <= tol) return y;
    }
    throw InfeasibleError("halfspace set is empty");
  }

  std::size_t dimension_ = 0;
  Kind kind_ = Unconstrained{};
};

/// Indices j with q_j(theta) >= -tolerance.
inline ActiveSet active_set(const ConstraintSet& set, const Eigen::VectorXd& theta,
                            double tolerance) {
  ActiveSet active{{}, tolerance};
  if (set.is_unconstrained()) return active;
  Eigen::VectorXd q = set.values(theta);
  for (Eigen::Index j = 0; j < q.size(); ++j) {
    if (q(j) > tolerance)
      throw InfeasibleError("point violates constraint " + std::to_string(j) +
                            " by " + std::to_string(q(j)));
    if (q(j) >= -tolerance) active.indices.push_back(static_cast<std::size_t>(j));
  }
  return active;
}

inline ActiveSet active_set(const ConstraintSet& set,
                            const Eigen::VectorXd& theta) {
  return active_set(set, theta, default_active_tolerance(theta));
}

struct KtResidual {
  double value = 0.0;
  /// False when the active gradients are linearly dependent.
  bool independent = true;
  ActiveSet active;
  Eigen::VectorXd multipliers;
};

/**
 * Distance from -g to the normal cone N_G(theta), i.e.
 * min_{lambda >= 0} | -g - sum_{j in A(theta)} lambda_j grad q_j |.
 * Zero exactly at Kuhn-Tucker points.
 */
inline KtResidual kt_residual(const ConstraintSet& set,
                              const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& gradient,
                              double tolerance) {
  if (gradient.size() != theta.size())
    throw ArgumentError("gradient and point dimensions differ");
  KtResidual out;
  out.active = active_set(set, theta, tolerance);
  const Eigen::VectorXd target = -gradient;
  const auto m = static_cast<Eigen::Index>(out.active.indices.size());
  if (m == 0) {
    out.value = gradient.norm();
    return out;
  }
  Eigen::MatrixXd normals(theta.size(), m);
  for (Eigen::Index c = 0; c < m; ++c)
    normals.col(c) = set.gradient(out.active.indices[static_cast<std::size_t>(c)]);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(normals);
  qr.setThreshold(1e-10);
  out.independent = qr.rank() == m;
  out.multipliers = detail::nnls(normals, target);
  out.value = (target - normals * out.multipliers).norm();
  return out;
}

inline KtResidual kt_residual(const ConstraintSet& set,
                              const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& gradient) {
  return kt_residual(set, theta, gradient, default_active_tolerance(theta));
}

/// (P_G(theta + gamma y) - theta) / gamma.
inline Eigen::VectorXd projection_drift(const ConstraintSet& set,
                                        const Eigen::VectorXd& theta,
                                        const Eigen::VectorXd& y, double gamma) {
  if (!(gamma > 0.0)) throw ArgumentError("gamma must be positive");
  return (set.project(theta + gamma * y) - theta) / gamma;
}

}  // namespace dsa
