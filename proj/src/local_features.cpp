#include "lpdnet/local_features.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

namespace lpdnet {

namespace {

constexpr double kProductFloor = 1e-12;  // guards the density denominator

struct NeighborhoodEigen {
  EigenTriple eigenvalues;
  Eigen::Vector3d normal;  // unit eigenvector of the smallest eigenvalue
};

NeighborhoodEigen covariance_eigen_full(const std::vector<Point3>& neighborhood) {
  if (neighborhood.size() < 3)
    throw DataError("covariance_eigen: neighborhood needs at least 3 points");

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : neighborhood) mean += Eigen::Vector3d(p.x, p.y, p.z);
  mean /= static_cast<double>(neighborhood.size());

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : neighborhood) {
    const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(neighborhood.size());

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  if (solver.info() != Eigen::Success)
    throw NumericError("covariance_eigen: eigensolver failed");

  // Eigen returns ascending eigenvalues; reorder descending and clamp.
  const Eigen::Vector3d ev = solver.eigenvalues();
  NeighborhoodEigen out;
  out.eigenvalues = {std::max(0.0, ev(2)), std::max(0.0, ev(1)), std::max(0.0, ev(0))};
  out.normal = solver.eigenvectors().col(0).normalized();
  return out;
}

// 2x2 covariance eigenvalues of the xy projection, descending, clamped.
std::pair<double, double> covariance_eigen_2d(const std::vector<Point3>& neighborhood) {
  double mx = 0.0, my = 0.0;
  for (const auto& p : neighborhood) {
    mx += p.x;
    my += p.y;
  }
  const double inv_n = 1.0 / static_cast<double>(neighborhood.size());
  mx *= inv_n;
  my *= inv_n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& p : neighborhood) {
    const double dx = p.x - mx, dy = p.y - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  sxx *= inv_n;
  sxy *= inv_n;
  syy *= inv_n;
  // Closed-form symmetric 2x2 eigenvalues.
  const double tr = sxx + syy;
  const double disc = std::sqrt(std::max(0.0, (sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy));
  const double l1 = std::max(0.0, 0.5 * (tr + disc));
  const double l2 = std::max(0.0, 0.5 * (tr - disc));
  return {l1, l2};
}

std::vector<Point3> gather_neighborhood(const PointCloud& cloud, std::size_t point_index,
                                        const NeighborList& nn) {
  std::vector<Point3> hood;
  hood.reserve(nn.indices.size() + 1);
  hood.push_back(cloud.points[point_index]);
  for (auto idx : nn.indices) hood.push_back(cloud.points[idx]);
  return hood;
}

}  // namespace

void AdaptiveNeighborhoodConfig::validate() const {
  if (k_min < 3) throw DataError("AdaptiveNeighborhoodConfig: k_min must be >= 3");
  if (k_min > k_max) throw DataError("AdaptiveNeighborhoodConfig: k_min must be <= k_max");
  if (k_step < 1) throw DataError("AdaptiveNeighborhoodConfig: k_step must be >= 1");
}

std::vector<std::size_t> AdaptiveNeighborhoodConfig::grid() const {
  validate();
  std::vector<std::size_t> ks;
  for (std::size_t k = k_min; k <= k_max; k += k_step) ks.push_back(k);
  return ks;
}

EigenTriple covariance_eigen(const std::vector<Point3>& neighborhood) {
  return covariance_eigen_full(neighborhood).eigenvalues;
}

double shannon_entropy(const EigenTriple& e) {
  if (!(e.l1 > 0.0)) throw NumericError("shannon_entropy: undefined entropy (l1 = 0)");
  const double linearity = (e.l1 - e.l2) / e.l1;
  const double planarity = (e.l2 - e.l3) / e.l1;
  const double scattering = e.l3 / e.l1;
  auto plogp = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };
  return std::max(0.0, -plogp(linearity) - plogp(planarity) - plogp(scattering));
}

std::size_t optimal_k(std::size_t point_index, const KdTree& tree, const PointCloud& cloud,
                      const AdaptiveNeighborhoodConfig& cfg) {
  const auto ks = cfg.grid();
  if (cloud.size() <= cfg.k_max)
    throw DataError("optimal_k: cloud must have more than k_max points");

  const auto& q = cloud.points[point_index];
  const double query[3] = {q.x, q.y, q.z};
  // One query at the largest k; prefixes give the smaller neighborhoods.
  const NeighborList nn = tree.knn(query, 3, ks.back(), point_index);

  double best_entropy = std::numeric_limits<double>::infinity();
  std::size_t best_k = 0;
  for (auto k : ks) {
    std::vector<Point3> hood;
    hood.reserve(k + 1);
    hood.push_back(cloud.points[point_index]);
    for (std::size_t i = 0; i < k; ++i) hood.push_back(cloud.points[nn.indices[i]]);
    const EigenTriple e = covariance_eigen(hood);
    if (!(e.l1 > 0.0)) continue;  // fully degenerate candidate
    const double entropy = shannon_entropy(e);
    if (entropy < best_entropy) {
      best_entropy = entropy;
      best_k = k;
    }
  }
  if (best_k == 0)
    throw NumericError("optimal_k: all candidate neighborhoods degenerate at point " +
                       std::to_string(point_index));
  return best_k;
}

LocalFeatureMatrix compute_local_features(const PointCloud& cloud,
                                          const AdaptiveNeighborhoodConfig& cfg,
                                          std::size_t threads) {
  cfg.validate();
  if (!cloud.normalized) throw DataError("compute_local_features: cloud must be normalized");
  if (cloud.size() <= cfg.k_max)
    throw DataError("compute_local_features: cloud must have more than k_max points");

  std::vector<std::vector<double>> pts(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    pts[i] = {cloud.points[i].x, cloud.points[i].y, cloud.points[i].z};
  const KdTree tree(std::move(pts));

  LocalFeatureMatrix out;
  out.n_points = cloud.size();
  out.values.assign(cloud.size() * kNumLocalFeatures, 0.0);

  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&](std::size_t begin, std::size_t end) {
    try {
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t k_opt = optimal_k(i, tree, cloud, cfg);
        const auto& q = cloud.points[i];
        const double query[3] = {q.x, q.y, q.z};
        const NeighborList nn = tree.knn(query, 3, k_opt, i);
        const std::vector<Point3> hood = gather_neighborhood(cloud, i, nn);

        const NeighborhoodEigen ne = covariance_eigen_full(hood);
        const double l1 = ne.eigenvalues.l1, l2 = ne.eigenvalues.l2, l3 = ne.eigenvalues.l3;
        const double sum = l1 + l2 + l3;
        if (!(l1 > 0.0) || !(sum > 0.0))
          throw NumericError("compute_local_features: degenerate neighborhood at point " +
                             std::to_string(i));

        const double change_of_curvature = l3 / sum;
        const double omnivariance = std::cbrt(l1 * l2 * l3) / sum;
        const double linearity = (l1 - l2) / l1;
        auto plogp = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };
        const double eig_entropy =
            std::max(0.0, -plogp(l1 / sum) - plogp(l2 / sum) - plogp(l3 / sum));
        const double density = static_cast<double>(k_opt) /
                               ((4.0 / 3.0) * std::max(l1 * l2 * l3, kProductFloor));

        const auto [p1, p2] = covariance_eigen_2d(hood);
        const double scatter_2d = p1 + p2;
        const double linearity_2d = p1 > 0.0 ? p2 / p1 : 0.0;

        const double vertical = std::abs(ne.normal.z());

        double zmin = hood[0].z, zmax = hood[0].z, zsum = 0.0;
        for (const auto& p : hood) {
          zmin = std::min(zmin, p.z);
          zmax = std::max(zmax, p.z);
          zsum += p.z;
        }
        const double zmean = zsum / static_cast<double>(hood.size());
        double zvar = 0.0;
        for (const auto& p : hood) zvar += (p.z - zmean) * (p.z - zmean);
        zvar /= static_cast<double>(hood.size());

        double* row = &out.values[i * kNumLocalFeatures];
        row[0] = change_of_curvature;
        row[1] = omnivariance;
        row[2] = linearity;
        row[3] = eig_entropy;
        row[4] = density;
        row[5] = scatter_2d;
        row[6] = linearity_2d;
        row[7] = vertical;
        row[8] = zmax - zmin;
        row[9] = zvar;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };

  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, cloud.size()));
  if (n_threads == 1) {
    worker(0, cloud.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (cloud.size() + n_threads - 1) / n_threads;
    for (std::size_t t = 0; t < n_threads; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(cloud.size(), begin + chunk);
      if (begin < end) pool.emplace_back(worker, begin, end);
    }
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

void save_feature_csv(const std::string& path, const LocalFeatureMatrix& features) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write feature csv: " + path);
  out << "index";
  for (const char* name : kLocalFeatureNames) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < features.n_points; ++i) {
    out << i;
    for (std::size_t f = 0; f < kNumLocalFeatures; ++f)
      out << ',' << format_double(features.at(i, f));
    out << '\n';
  }
}

}  // namespace lpdnet
