#include "lpdnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace lpdnet {

namespace {

double l2_distance(const double* a, const double* b, std::size_t dim) {
  double sq = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    const double diff = a[c] - b[c];
    sq += diff * diff;
  }
  return std::sqrt(sq);
}

}  // namespace

SimilarityMap similarity_map(const DescriptorIndex& index, const std::string& id) {
  const auto ref = index.find(id);
  if (!ref) throw DataError("similarity_map: unknown id '" + id + "'");
  SimilarityMap map;
  map.reference_id = id;
  map.entries.reserve(index.size() - 1);
  const double* r = index.descriptor(*ref);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (i == *ref) continue;
    map.entries.push_back(
        {index.ids()[i], l2_distance(r, index.descriptor(i), index.dimension())});
  }
  return map;
}

std::vector<UniquenessScore> uniqueness(const DescriptorIndex& index) {
  const std::size_t n = index.size();
  if (n < 2) throw DataError("uniqueness: index needs at least 2 entries");

  std::vector<double> raw(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = l2_distance(index.descriptor(i), index.descriptor(j), index.dimension());
      raw[i] += d;
      raw[j] += d;
    }
  }
  const double lo = *std::min_element(raw.begin(), raw.end());
  const double hi = *std::max_element(raw.begin(), raw.end());
  const double span = hi - lo;

  std::vector<UniquenessScore> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = index.ids()[i];
    out[i].score = span > 0.0 ? (raw[i] - lo) / span : 0.0;
  }
  return out;
}

ClusterResult cluster_descriptors(const DescriptorIndex& index, std::size_t k,
                                  std::uint64_t seed) {
  const std::size_t n = index.size();
  const std::size_t dim = index.dimension();
  if (k < 1 || k > n) throw DataError("cluster_descriptors: k out of range");

  // Farthest-point initialization: seeded first center, then repeatedly the
  // point farthest from its nearest chosen center (ties to the lower index).
  Rng rng(mix_seed(seed, 0xc1u));
  std::vector<double> centers(k * dim);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  std::copy_n(index.descriptor(first), dim, centers.begin());
  for (std::size_t c = 1; c < k; ++c) {
    std::size_t far_idx = 0;
    double far_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = l2_distance(index.descriptor(i), &centers[(c - 1) * dim], dim);
      nearest[i] = std::min(nearest[i], d);
      if (nearest[i] > far_dist) {
        far_dist = nearest[i];
        far_idx = i;
      }
    }
    std::copy_n(index.descriptor(far_idx), dim, centers.begin() + c * dim);
  }

  std::vector<std::size_t> labels(n, 0);
  std::vector<std::size_t> counts(k, 0);
  std::vector<double> sums(k * dim, 0.0);
  std::vector<double> history;
  double wcss = 0.0;
  std::size_t iterations = 0;
  constexpr std::size_t kMaxIterations = 100;

  for (; iterations < kMaxIterations; ++iterations) {
    bool changed = iterations == 0;
    wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_sq = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double sq = 0.0;
        const double* ctr = &centers[c * dim];
        const double* pt = index.descriptor(i);
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = pt[d] - ctr[d];
          sq += diff * diff;
        }
        if (sq < best_sq) {
          best_sq = sq;
          best = c;
        }
      }
      if (labels[i] != best) changed = true;
      labels[i] = best;
      wcss += best_sq;
    }
    history.push_back(wcss);
    if (!changed) break;

    std::fill(counts.begin(), counts.end(), std::size_t{0});
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* pt = index.descriptor(i);
      double* s = &sums[labels[i] * dim];
      ++counts[labels[i]];
      for (std::size_t d = 0; d < dim; ++d) s[d] += pt[d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its center
      for (std::size_t d = 0; d < dim; ++d)
        centers[c * dim + d] = sums[c * dim + d] / static_cast<double>(counts[c]);
    }
  }

  return {std::move(labels), wcss, iterations, std::move(history)};
}

void save_similarity_csv(const std::string& path, const SimilarityMap& map) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write similarity csv: " + path);
  out << "id,distance\n";
  for (const auto& e : map.entries) out << e.id << ',' << format_double(e.distance) << '\n';
}

void save_uniqueness_csv(const std::string& path, const std::vector<UniquenessScore>& scores) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write uniqueness csv: " + path);
  out << "id,score\n";
  for (const auto& s : scores) out << s.id << ',' << format_double(s.score) << '\n';
}

void save_cluster_csv(const std::string& path, const DescriptorIndex& index,
                      const ClusterResult& result) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write cluster csv: " + path);
  out << "id,label\n";
  for (std::size_t i = 0; i < index.size(); ++i)
    out << index.ids()[i] << ',' << result.labels[i] << '\n';
}

}  // namespace lpdnet
