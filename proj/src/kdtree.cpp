#include "lpdnet/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

namespace lpdnet {

namespace {

// Candidate ordered by (squared distance, index); the heap keeps the worst
// candidate on top so ties resolve toward lower indices deterministically.
struct Candidate {
  double dist;
  std::size_t index;
  bool operator<(const Candidate& o) const {
    return dist != o.dist ? dist < o.dist : index < o.index;
  }
};

}  // namespace

KdTree::KdTree(std::vector<std::vector<double>> points, std::size_t leaf_size)
    : leaf_size_(std::max<std::size_t>(1, leaf_size)) {
  if (points.empty()) throw DataError("KdTree: empty point set");
  dim_ = points[0].size();
  if (dim_ == 0) throw DataError("KdTree: zero-dimensional points");
  n_ = points.size();
  data_.resize(n_ * dim_);
  for (std::size_t i = 0; i < n_; ++i) {
    if (points[i].size() != dim_)
      throw DataError("KdTree: dimension mismatch at point " + std::to_string(i));
    std::copy(points[i].begin(), points[i].end(), data_.begin() + i * dim_);
  }
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  nodes_.reserve(2 * n_ / leaf_size_ + 2);
  root_ = build_node(0, n_);
}

KdTree KdTree::from_flat(const std::vector<double>& data, std::size_t dim,
                         std::size_t leaf_size) {
  if (dim == 0 || data.size() % dim != 0) throw DataError("KdTree::from_flat: bad data size");
  std::vector<std::vector<double>> pts(data.size() / dim);
  for (std::size_t i = 0; i < pts.size(); ++i)
    pts[i].assign(data.begin() + i * dim, data.begin() + (i + 1) * dim);
  return KdTree(std::move(pts), leaf_size);
}

int KdTree::build_node(std::size_t begin, std::size_t end) {
  Node node;
  node.begin = begin;
  node.end = end;
  const std::size_t count = end - begin;
  if (count <= leaf_size_) {
    nodes_.push_back(node);
    return static_cast<int>(nodes_.size() - 1);
  }

  // Split on the widest dimension at the median.
  std::size_t best_dim = 0;
  double best_spread = -1.0;
  for (std::size_t d = 0; d < dim_; ++d) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      const double v = data_[order_[i] * dim_ + d];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo > best_spread) {
      best_spread = hi - lo;
      best_dim = d;
    }
  }
  if (best_spread == 0.0) {
    // All points identical; keep as leaf.
    nodes_.push_back(node);
    return static_cast<int>(nodes_.size() - 1);
  }

  const std::size_t mid = begin + count / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::size_t a, std::size_t b) {
                     const double va = data_[a * dim_ + best_dim];
                     const double vb = data_[b * dim_ + best_dim];
                     return va != vb ? va < vb : a < b;
                   });
  node.split_dim = best_dim;
  node.split_value = data_[order_[mid] * dim_ + best_dim];

  const int self = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  const int left = build_node(begin, mid);
  const int right = build_node(mid, end);
  nodes_[self].left = left;
  nodes_[self].right = right;
  return self;
}

NeighborList KdTree::knn(const std::vector<double>& query, std::size_t k,
                         std::optional<std::size_t> exclude) const {
  return knn(query.data(), query.size(), k, exclude);
}

NeighborList KdTree::knn(const double* query, std::size_t query_dim, std::size_t k,
                         std::optional<std::size_t> exclude) const {
  if (query_dim != dim_) throw DataError("KdTree::knn: query dimension mismatch");
  if (k == 0) throw DataError("KdTree::knn: k must be >= 1");
  const std::size_t available = n_ - (exclude && *exclude < n_ ? 1 : 0);
  if (k > available)
    throw DataError("KdTree::knn: k=" + std::to_string(k) + " exceeds available points (" +
                    std::to_string(available) + ")");

  std::priority_queue<Candidate> heap;  // worst candidate on top

  auto consider = [&](std::size_t idx) {
    if (exclude && idx == *exclude) return;
    double d = 0.0;
    const double* p = &data_[idx * dim_];
    for (std::size_t j = 0; j < dim_; ++j) {
      const double diff = p[j] - query[j];
      d += diff * diff;
    }
    const Candidate c{d, idx};
    if (heap.size() < k) {
      heap.push(c);
    } else if (c < heap.top()) {
      heap.pop();
      heap.push(c);
    }
  };

  // Iterative depth-first descent with pruning. Cannot prune on equality:
  // an equal-distance point with a lower index must still displace the top.
  std::vector<int> stack;
  stack.push_back(root_);
  while (!stack.empty()) {
    const int ni = stack.back();
    stack.pop_back();
    if (ni < 0) continue;
    const Node& node = nodes_[ni];
    if (node.split_dim == npos) {
      for (std::size_t i = node.begin; i < node.end; ++i) consider(order_[i]);
      continue;
    }
    if (heap.size() == k) {
      const double gap = query[node.split_dim] - node.split_value;
      // Lower bound on distances in the far half-space.
      if (gap * gap > heap.top().dist) {
        // Only the near side can contain improvements.
        stack.push_back(gap < 0.0 ? node.left : node.right);
        continue;
      }
    }
    // Visit near side first (popped last pushes processed first — push far first).
    if (query[node.split_dim] < node.split_value) {
      stack.push_back(node.right);
      stack.push_back(node.left);
    } else {
      stack.push_back(node.left);
      stack.push_back(node.right);
    }
  }

  NeighborList result;
  result.indices.resize(heap.size());
  result.distances.resize(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    result.indices[i] = heap.top().index;
    result.distances[i] = heap.top().dist;
    heap.pop();
  }
  return result;
}

}  // namespace lpdnet
