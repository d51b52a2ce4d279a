#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "lpdnet/common.hpp"

namespace lpdnet {

// Exact k-nearest-neighbor result. Distances are squared Euclidean, sorted
// ascending; ties broken by lower point index.
struct NeighborList {
  std::vector<std::size_t> indices;
  std::vector<double> distances;
};

// Static kd-tree over an immutable d-dimensional point set. Queries are
// exact; high dimensions are supported (pruning just degrades).
class KdTree {
 public:
  KdTree(std::vector<std::vector<double>> points, std::size_t leaf_size = 16);

  // Convenience for flat row-major storage.
  static KdTree from_flat(const std::vector<double>& data, std::size_t dim,
                          std::size_t leaf_size = 16);

  std::size_t size() const { return n_; }
  std::size_t dimension() const { return dim_; }

  // The k nearest points to `query`, optionally excluding one stored index.
  NeighborList knn(const std::vector<double>& query, std::size_t k,
                   std::optional<std::size_t> exclude = {}) const;
  NeighborList knn(const double* query, std::size_t query_dim, std::size_t k,
                   std::optional<std::size_t> exclude = {}) const;

  const double* point(std::size_t i) const { return &data_[i * dim_]; }

 private:
  struct Node {
    // Leaf when split_dim is npos: [begin, end) into order_.
    std::size_t split_dim = npos;
    double split_value = 0.0;
    std::size_t begin = 0, end = 0;
    int left = -1, right = -1;
  };
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  int build_node(std::size_t begin, std::size_t end);

  std::size_t n_ = 0;
  std::size_t dim_ = 0;
  std::size_t leaf_size_ = 16;
  std::vector<double> data_;          // row-major n x dim
  std::vector<std::size_t> order_;    // permutation of point indices
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace lpdnet
