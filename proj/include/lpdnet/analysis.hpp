#pragma once

#include <string>
#include <vector>

#include "lpdnet/retrieval.hpp"

namespace lpdnet {

// L2 distances from one reference place to every other place in the index
// (smaller = more similar). The reference itself is excluded.
struct SimilarityMap {
  std::string reference_id;
  std::vector<QueryHit> entries;  // index insertion order
};

SimilarityMap similarity_map(const DescriptorIndex& index, const std::string& id);

struct UniquenessScore {
  std::string id;
  double score = 0.0;  // min-max normalized; higher = more unique
};

// Raw score of a place is the sum of its distances to all other places;
// scores are min-max normalized to [0,1] (all zeros when degenerate).
std::vector<UniquenessScore> uniqueness(const DescriptorIndex& index);

struct ClusterResult {
  std::vector<std::size_t> labels;  // per index entry
  double wcss = 0.0;                // final within-cluster sum of squares
  std::size_t iterations = 0;
  std::vector<double> wcss_history;  // one value per refinement iteration
};

// k-means with seeded farthest-point initialization; at most 100 Lloyd
// iterations, deterministic per seed.
ClusterResult cluster_descriptors(const DescriptorIndex& index, std::size_t k,
                                  std::uint64_t seed);

void save_similarity_csv(const std::string& path, const SimilarityMap& map);
void save_uniqueness_csv(const std::string& path, const std::vector<UniquenessScore>& scores);
void save_cluster_csv(const std::string& path, const DescriptorIndex& index,
                      const ClusterResult& result);

}  // namespace lpdnet
