#pragma once

#include <cstddef>
#include <utility>

#include <Eigen/Dense>

#include "dsa/errors.hpp"

namespace dsa {

/**
 * Network state theta = (theta_1^T, ..., theta_N^T)^T in R^{dN}, held as a
 * d x N matrix whose column i is agent i's estimate. Column-major storage keeps
 * each agent block contiguous, so the stacked vector is a plain reshape.
 */
class StackedIterate {
 public:
  StackedIterate() = default;

  StackedIterate(std::size_t dimension, std::size_t agents)
      : blocks_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dimension),
                                      static_cast<Eigen::Index>(agents))) {}

  explicit StackedIterate(Eigen::MatrixXd blocks) : blocks_(std::move(blocks)) {}

  static StackedIterate from_stacked(const Eigen::VectorXd& stacked,
                                     std::size_t dimension) {
    if (dimension == 0 || stacked.size() % static_cast<Eigen::Index>(dimension) != 0)
      throw ArgumentError("stacked length is not a multiple of the dimension");
    const auto d = static_cast<Eigen::Index>(dimension);
    return StackedIterate(
        Eigen::Map<const Eigen::MatrixXd>(stacked.data(), d, stacked.size() / d));
  }

  /// Every agent holds the same point v (the consensus vector 1 (x) v).
  static StackedIterate consensus(const Eigen::VectorXd& v, std::size_t agents) {
    return StackedIterate(v.replicate(1, static_cast<Eigen::Index>(agents)));
  }

  std::size_t dimension() const { return static_cast<std::size_t>(blocks_.rows()); }
  std::size_t agents() const { return static_cast<std::size_t>(blocks_.cols()); }

  auto block(std::size_t i) { return blocks_.col(static_cast<Eigen::Index>(i)); }
  auto block(std::size_t i) const {
    return blocks_.col(static_cast<Eigen::Index>(i));
  }

  const Eigen::MatrixXd& blocks() const { return blocks_; }
  Eigen::MatrixXd& blocks() { return blocks_; }

  Eigen::VectorXd stacked() const {
    return Eigen::Map<const Eigen::VectorXd>(blocks_.data(), blocks_.size());
  }

  bool all_finite() const { return blocks_.allFinite(); }

  friend bool operator==(const StackedIterate& a, const StackedIterate& b) {
    return a.blocks_.rows() == b.blocks_.rows() &&
           a.blocks_.cols() == b.blocks_.cols() &&
           (a.blocks_.array() == b.blocks_.array()).all();
  }

 private:
  Eigen::MatrixXd blocks_;
};

}  // namespace dsa
