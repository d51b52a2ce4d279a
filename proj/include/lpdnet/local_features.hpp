#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "lpdnet/kdtree.hpp"
#include "lpdnet/point_cloud.hpp"

namespace lpdnet {

// Eigenvalues of a local 3D covariance, sorted l1 >= l2 >= l3 >= 0.
struct EigenTriple {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
};

// Candidate grid {k_min, k_min+k_step, ..., <= k_max} for the adaptive
// neighborhood search.
struct AdaptiveNeighborhoodConfig {
  std::size_t k_min = 10;
  std::size_t k_max = 100;
  std::size_t k_step = 10;

  void validate() const;
  std::vector<std::size_t> grid() const;
};

// Column order of the per-point feature matrix (and of the CSV dump).
inline constexpr std::array<const char*, 10> kLocalFeatureNames = {
    "C", "O", "L", "A", "D", "S2D", "L2D", "V", "dZmax", "sZvar"};
inline constexpr std::size_t kNumLocalFeatures = 10;

// N x 10 row-major feature matrix.
struct LocalFeatureMatrix {
  std::size_t n_points = 0;
  std::vector<double> values;  // n_points * 10

  double at(std::size_t point, std::size_t feature) const {
    return values[point * kNumLocalFeatures + feature];
  }
};

// Eigenvalues of the biased (divide-by-n) covariance of the centered
// neighborhood, clamped to >= 0.
EigenTriple covariance_eigen(const std::vector<Point3>& neighborhood);

// Eigen-entropy of the linearity/planarity/scattering decomposition,
// with the 0*ln(0) := 0 convention. Requires l1 > 0.
double shannon_entropy(const EigenTriple& e);

// Entropy-minimizing neighbor count over the candidate grid; the
// neighborhood of candidate k is the point itself plus its k nearest
// others. Ties resolve to the smallest k.
std::size_t optimal_k(std::size_t point_index, const KdTree& tree, const PointCloud& cloud,
                      const AdaptiveNeighborhoodConfig& cfg);

// All ten adaptive local features for every point. `threads` bounds worker
// parallelism; the result is identical for any thread count.
LocalFeatureMatrix compute_local_features(const PointCloud& cloud,
                                          const AdaptiveNeighborhoodConfig& cfg,
                                          std::size_t threads = 1);

// CSV dump with header "index,C,O,L,A,D,S2D,L2D,V,dZmax,sZvar".
void save_feature_csv(const std::string& path, const LocalFeatureMatrix& features);

}  // namespace lpdnet
