#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dsa/errors.hpp"
#include "dsa/rng.hpp"

namespace dsa {

/// Unordered agent pair, stored with first < second. Agents are 0-based.
struct Edge {
  std::size_t first = 0;
  std::size_t second = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/**
 * Undirected communication graph with a probability P_{i,j} attached to each
 * edge: the chance that {i,j} is the active pair when a gossip exchange takes
 * place.
 */
class Graph {
 public:
  Graph() = default;

  /// Uniform pair probabilities over the given edges.
  Graph(std::size_t n_agents, std::vector<Edge> edges)
      : Graph(n_agents, edges,
              std::vector<double>(edges.size(),
                                  edges.empty() ? 0.0 : 1.0 / edges.size())) {}

  Graph(std::size_t n_agents, std::vector<Edge> edges,
        std::vector<double> pair_probs)
      : n_agents_(n_agents),
        edges_(std::move(edges)),
        probs_(std::move(pair_probs)) {
    if (n_agents_ < 2) throw ArgumentError("graph needs at least 2 agents");
    if (edges_.empty()) throw ArgumentError("graph needs at least one edge");
    if (probs_.size() != edges_.size())
      throw ArgumentError("one probability per edge is required");
    for (auto& e : edges_) {
      if (e.first == e.second)
        throw ArgumentError("edge endpoints must be distinct (agent " +
                            std::to_string(e.first + 1) + ")");
      if (e.first >= n_agents_ || e.second >= n_agents_)
        throw ArgumentError("edge endpoint out of range");
      if (e.first > e.second) std::swap(e.first, e.second);
    }
    for (std::size_t a = 0; a < edges_.size(); ++a)
      for (std::size_t b = a + 1; b < edges_.size(); ++b)
        if (edges_[a] == edges_[b])
          throw ArgumentError("duplicate edge {" +
                              std::to_string(edges_[a].first + 1) + "," +
                              std::to_string(edges_[a].second + 1) + "}");
    double total = 0.0;
    for (double p : probs_) {
      if (!(p > 0.0)) throw ArgumentError("pair probabilities must be > 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw ArgumentError("pair probabilities must sum to 1");
    cumulative_.resize(probs_.size());
    std::partial_sum(probs_.begin(), probs_.end(), cumulative_.begin());
  }

  /// Positive weights, normalized to probabilities. Weights that already sum
  /// to 1 are kept bit-for-bit.
  static Graph from_weights(std::size_t n_agents, std::vector<Edge> edges,
                            std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w > 0.0)) throw ArgumentError("edge weights must be > 0");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      for (double& w : weights) w /= total;
    return Graph(n_agents, std::move(edges), std::move(weights));
  }

  /// True when every edge has the same probability.
  bool uniform() const {
    return std::all_of(probs_.begin(), probs_.end(),
                       [&](double p) { return p == probs_.front(); });
  }

  std::size_t n_agents() const { return n_agents_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<double>& pair_probs() const { return probs_; }

  /// Edge selected by a uniform draw u in [0, 1).
  const Edge& pick(double u) const {
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    auto k = static_cast<std::size_t>(it - cumulative_.begin());
    return edges_[std::min(k, edges_.size() - 1)];
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.n_agents_ == b.n_agents_ && a.edges_ == b.edges_ &&
           a.probs_ == b.probs_;
  }

 private:
  std::size_t n_agents_ = 0;
  std::vector<Edge> edges_;
  std::vector<double> probs_;
  std::vector<double> cumulative_;
};

/// Activation probability p_n = min(1, c n^{-eta}). c = 0 disables gossip.
struct Laziness {
  double c = 1.0;
  double eta = 0.0;

  double activation(std::uint64_t n) const {
    if (c == 0.0) return 0.0;
    if (eta == 0.0) return std::min(1.0, c);
    return std::min(1.0, c * std::pow(static_cast<double>(n), -eta));
  }

  void validate() const {
    if (!(c >= 0.0) || !std::isfinite(c))
      throw ArgumentError("laziness constant c must be >= 0");
    if (!(eta >= 0.0) || !std::isfinite(eta))
      throw ArgumentError("laziness exponent eta must be >= 0");
  }

  friend bool operator==(const Laziness&, const Laziness&) = default;
};

/// Random pairwise gossip with a laziness schedule.
struct GossipModel {
  Graph graph;
  Laziness laziness;

  std::size_t n_agents() const { return graph.n_agents(); }
  friend bool operator==(const GossipModel&, const GossipModel&) = default;
};

/**
 * Doubly stochastic mixing matrix. Construction checks row and column sums
 * and the entry range. Pairwise and identity matrices remember their
 * structure so the gossip step can touch two blocks only.
 */
class GossipMatrix {
 public:
  static constexpr double kTolerance = 1e-12;

  explicit GossipMatrix(Eigen::MatrixXd entries)
      : entries_(std::move(entries)) {
    check();
  }

  static GossipMatrix identity(std::size_t n_agents) {
    GossipMatrix w(Eigen::MatrixXd::Identity(n_agents, n_agents), Unchecked{});
    w.identity_ = true;
    return w;
  }

  static GossipMatrix pairwise(Edge e, std::size_t n_agents) {
    if (e.first == e.second)
      throw ArgumentError("pairwise gossip needs two distinct agents");
    if (e.first >= n_agents || e.second >= n_agents)
      throw ArgumentError("agent index out of range");
    if (e.first > e.second) std::swap(e.first, e.second);
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n_agents, n_agents);
    m(e.first, e.first) = 0.5;
    m(e.second, e.second) = 0.5;
    m(e.first, e.second) = 0.5;
    m(e.second, e.first) = 0.5;
    GossipMatrix w(std::move(m), Unchecked{});
    w.pair_ = e;
    return w;
  }

  const Eigen::MatrixXd& entries() const { return entries_; }
  std::size_t size() const { return static_cast<std::size_t>(entries_.rows()); }
  bool is_identity() const { return identity_; }
  const std::optional<Edge>& pair() const { return pair_; }
  double operator()(std::size_t i, std::size_t j) const {
    return entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

 private:
  struct Unchecked {};
  GossipMatrix(Eigen::MatrixXd entries, Unchecked)
      : entries_(std::move(entries)) {}

  void check() const {
    if (entries_.rows() != entries_.cols() || entries_.rows() == 0)
      throw ConfigError("gossip matrix must be square and non-empty");
    if (!entries_.allFinite() || entries_.minCoeff() < -kTolerance ||
        entries_.maxCoeff() > 1.0 + kTolerance)
      throw ConfigError("gossip matrix entries must lie in [0, 1]");
    double row_err = (entries_.rowwise().sum().array() - 1.0).abs().maxCoeff();
    double col_err = (entries_.colwise().sum().array() - 1.0).abs().maxCoeff();
    if (row_err > kTolerance || col_err > kTolerance)
      throw ConfigError("gossip matrix is not doubly stochastic");
  }

  Eigen::MatrixXd entries_;
  bool identity_ = false;
  std::optional<Edge> pair_;
};

/// W_{i,j} = I - (e_i - e_j)(e_i - e_j)^T / 2.
inline GossipMatrix pairwise_matrix(std::size_t i, std::size_t j,
                                    std::size_t n_agents) {
  return GossipMatrix::pairwise(Edge{i, j}, n_agents);
}

/**
 * Active pair at iteration n, or nullopt when the network stays idle.
 * A pure function of (model, n, seed, replica).
 */
inline std::optional<Edge> draw_exchange(const GossipModel& model,
                                         std::uint64_t n, std::uint64_t seed,
                                         std::uint64_t replica = 0) {
  Rng rng = make_stream(seed, replica, StreamTag::kGossip, n);
  double u_active = rng.uniform();
  if (u_active >= model.laziness.activation(n)) return std::nullopt;
  return model.graph.pick(rng.uniform());
}

inline GossipMatrix sample_gossip(const GossipModel& model, std::uint64_t n,
                                  std::uint64_t seed,
                                  std::uint64_t replica = 0) {
  if (n < 1) throw ArgumentError("iteration index starts at 1");
  auto pair = draw_exchange(model, n, seed, replica);
  if (!pair) return GossipMatrix::identity(model.n_agents());
  return GossipMatrix::pairwise(*pair, model.n_agents());
}

/// E(W_n) by enumeration of the alphabet. Pairwise matrices are idempotent and
/// symmetric, so this also equals E(W_n W_n^T).
inline Eigen::MatrixXd expected_gossip(const GossipModel& model,
                                       std::uint64_t n) {
  const auto n_agents = static_cast<Eigen::Index>(model.n_agents());
  const double p = model.laziness.activation(n);
  Eigen::MatrixXd mean = Eigen::MatrixXd::Identity(n_agents, n_agents);
  const auto& edges = model.graph.edges();
  const auto& probs = model.graph.pair_probs();
  for (std::size_t k = 0; k < edges.size(); ++k) {
    // W_e - I = -(e_i - e_j)(e_i - e_j)^T / 2
    const auto i = static_cast<Eigen::Index>(edges[k].first);
    const auto j = static_cast<Eigen::Index>(edges[k].second);
    const double w = 0.5 * p * probs[k];
    mean(i, i) -= w;
    mean(j, j) -= w;
    mean(i, j) += w;
    mean(j, i) += w;
  }
  return mean;
}

/// Spectral radius rho_n of E(W_n W_n^T) - 11^T/N.
inline double spectral_gap(const GossipModel& model, std::uint64_t n) {
  const auto n_agents = static_cast<Eigen::Index>(model.n_agents());
  Eigen::MatrixXd m = expected_gossip(model, n);
  m.array() -= 1.0 / static_cast<double>(n_agents);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m,
                                                      Eigen::EigenvaluesOnly);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

inline bool is_connected(const Graph& graph) {
  const std::size_t n = graph.n_agents();
  if (n == 0) return false;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::size_t components = n;
  for (std::size_t k = 0; k < graph.edges().size(); ++k) {
    if (!(graph.pair_probs()[k] > 0.0)) continue;
    auto a = find(graph.edges()[k].first);
    auto b = find(graph.edges()[k].second);
    if (a != b) {
      parent[a] = b;
      --components;
    }
  }
  return components == 1;
}

}  // namespace dsa
