#pragma once

// Independent oracle implementations for the test suites. Everything here
// deliberately avoids the code paths of the library (no Eigen, no kd-tree):
// linear-scan kNN, characteristic-polynomial eigensolves, direct formula
// evaluation.

#include <array>
#include <cstddef>
#include <vector>

#include "lpdnet/point_cloud.hpp"

namespace lpdnet::oracle {

// Exact kNN by full sort over squared distances, ties by lower index.
struct BruteHit {
  std::size_t index;
  double distance_sq;
};
std::vector<BruteHit> brute_knn(const std::vector<std::vector<double>>& points,
                                const std::vector<double>& query, std::size_t k,
                                long exclude = -1);

// Symmetric 3x3 eigenvalues via the trigonometric characteristic-polynomial
// solution, descending, clamped to >= 0.
std::array<double, 3> eigenvalues_3x3(const std::array<std::array<double, 3>, 3>& m);

// Unit eigenvector for the smallest eigenvalue (cross-product construction).
std::array<double, 3> smallest_eigenvector_3x3(const std::array<std::array<double, 3>, 3>& m,
                                               double smallest_eigenvalue);

// Biased covariance of a neighborhood, formed by hand.
std::array<std::array<double, 3>, 3> covariance_3x3(const std::vector<Point3>& neighborhood);

// Eigen-entropy of the linearity/planarity/scattering split (0 ln 0 := 0).
double entropy_from_eigenvalues(const std::array<double, 3>& ev);

// Exhaustive adaptive-k search: for every candidate k, neighbors by full
// sort, covariance from scratch, entropy by formula; argmin with ties to
// the smallest k.
std::size_t exhaustive_optimal_k(const PointCloud& cloud, std::size_t point,
                                 const std::vector<std::size_t>& k_grid);

// All ten local features of one point computed from scratch.
std::array<double, 10> local_features_of_point(const PointCloud& cloud, std::size_t point,
                                               const std::vector<std::size_t>& k_grid);

}  // namespace lpdnet::oracle
