#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lpdnet/autodiff.hpp"
#include "lpdnet/local_features.hpp"
#include "lpdnet/point_cloud.hpp"

namespace lpdnet {

// Fig. layout of the feature-transform / relation-extraction stage.
enum class RelationVariant { kOriginal, kSeries, kParallel };  // O, S, P

// Dual-space aggregation structure.
enum class AggregationVariant { kParallelConcat, kParallelMax, kSeriesFc };  // PC, PM, SF

RelationVariant relation_variant_from_string(const std::string& s);
AggregationVariant aggregation_variant_from_string(const std::string& s);
std::string to_string(RelationVariant v);
std::string to_string(AggregationVariant v);

struct NetworkConfig {
  std::size_t n_points = 4096;
  std::vector<std::size_t> fn_mlp = {64, 64};
  std::vector<std::size_t> tnet_mlp = {64, 128, 1024};
  std::vector<std::size_t> tnet_fc = {512, 256};
  std::vector<std::size_t> graph_mlp = {64, 64};
  std::vector<std::size_t> fc_stack = {64, 128, 1024};
  std::size_t kf = 20;  // feature-space neighbors
  std::size_t kc = 20;  // Cartesian-space neighbors
  RelationVariant relation = RelationVariant::kParallel;
  AggregationVariant aggregation = AggregationVariant::kSeriesFc;
  std::size_t graph_iterations = 1;
  std::size_t vlad_clusters = 64;  // K
  std::size_t output_dim = 256;    // D
  bool use_local_features = true;  // ablation switch: zeros instead of the ten features
  AdaptiveNeighborhoodConfig neighborhood;

  void validate() const;

  // Width-scaled profile for desk-scale runs; factor 1 reproduces the
  // reference widths.
  static NetworkConfig desk_scale(double factor, std::size_t n_points);
};

// key=value text serialization.
void save_network_config(const std::string& path, const NetworkConfig& cfg);
NetworkConfig load_network_config(const std::string& path);

// Unit-norm place signature.
struct GlobalDescriptor {
  std::vector<double> values;
};

// Per-cloud input bundle. Everything here is parameter-independent and can
// be cached across training steps: canonical point order, conditioned local
// features, Cartesian kNN indices.
struct CloudInput {
  Tensor coords;          // N x 3, canonical (lexicographic) order
  Tensor local_features;  // N x 10, conditioned for network input
  std::vector<std::size_t> cartesian_knn;  // N*kc flattened neighbor indices
};

// Exact kNN in the current feature space; excludes self, ties by lower
// index. Returns flattened N*k indices.
std::vector<std::size_t> feature_space_knn(const Tensor& features, std::size_t k);

class Network {
 public:
  // Creates any missing parameters in `params` (deterministic order).
  Network(NetworkConfig cfg, ad::ParamStore& params);

  const NetworkConfig& config() const { return cfg_; }
  ad::ParamStore& params() const { return *params_; }

  CloudInput prepare(const PointCloud& cloud, std::size_t threads = 1) const;

  // Full pipeline: transform, feature network, aggregation, head, NetVLAD.
  ad::Var forward(const CloudInput& input) const;
  GlobalDescriptor descriptor(const CloudInput& input) const;

  // Stages exposed for verification.
  ad::Var input_transform(const ad::Var& coords) const;
  // Returns (features, relation source) per the configured variant.
  std::pair<ad::Var, ad::Var> feature_network(const ad::Var& coords,
                                              const ad::Var& local_feats) const;
  ad::Var graph_block(const ad::Var& features, const std::vector<std::size_t>& neighbors,
                      std::size_t k, const std::string& prefix) const;
  ad::Var aggregate(const ad::Var& features, const ad::Var& relation_source,
                    const std::vector<std::size_t>& cartesian_knn) const;
  ad::Var netvlad(const ad::Var& point_features) const;

 private:
  ad::Var transform_net(const std::string& prefix, const ad::Var& input,
                        std::size_t out_dim) const;
  void create_params();

  NetworkConfig cfg_;
  ad::ParamStore* params_;
};

// Density is the one feature with an unbounded dynamic range; the network
// input uses a log compression of it. The raw feature matrix is unchanged.
Tensor condition_features_for_network(const LocalFeatureMatrix& features);

}  // namespace lpdnet
