#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "lpdnet/network.hpp"
#include "lpdnet/point_cloud.hpp"

namespace lpdnet {

struct LossConfig {
  double alpha = 0.5;  // margin against the negatives
  double beta = 0.2;   // margin for the other-negative term

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0)) throw DataError("LossConfig: margins must be > 0");
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch_quadruplets = 2;
  std::size_t quads_per_epoch = 0;  // 0: one per training item
  std::uint64_t seed = 42;
  std::size_t p_pos = 2;
  std::size_t p_neg = 18;
  std::size_t threads = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct Quadruplet {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::size_t other_negative = 0;
};

// Item collection with a same-place relation. Synthetic registries use the
// place seed; manifests use the positive radius.
class PlaceDatabase {
 public:
  virtual ~PlaceDatabase() = default;
  virtual std::size_t size() const = 0;
  virtual std::string id(std::size_t item) const = 0;
  virtual bool same_place(std::size_t a, std::size_t b) const = 0;
  virtual PointCloud cloud(std::size_t item) const = 0;
};

// places x observations grid of generated scenes. Observation parameters
// are fixed per database (rotation, noise) so train/eval splits are exact.
class SyntheticPlaceDatabase : public PlaceDatabase {
 public:
  SyntheticPlaceDatabase(std::size_t places, std::size_t observations, std::size_t n_points,
                         std::uint64_t seed, double rotation_deg = 0.0, double noise_frac = 0.0);

  std::size_t size() const override { return places_ * observations_; }
  std::string id(std::size_t item) const override;
  bool same_place(std::size_t a, std::size_t b) const override;
  PointCloud cloud(std::size_t item) const override;

  std::size_t places() const { return places_; }
  std::size_t observations() const { return observations_; }
  std::size_t place_of(std::size_t item) const { return item / observations_; }
  std::uint64_t place_seed(std::size_t place) const;
  std::uint64_t observation_seed(std::size_t place, std::size_t observation) const;

 private:
  std::size_t places_, observations_, n_points_;
  std::uint64_t seed_;
  double rotation_deg_, noise_frac_;
};

// Manifest-backed database; clouds are loaded from disk and resampled to
// n_points when larger.
class ManifestPlaceDatabase : public PlaceDatabase {
 public:
  ManifestPlaceDatabase(DatasetManifest manifest, std::size_t n_points, std::uint64_t seed);

  std::size_t size() const override { return manifest_.records.size(); }
  std::string id(std::size_t item) const override { return manifest_.records[item].id; }
  bool same_place(std::size_t a, std::size_t b) const override;
  PointCloud cloud(std::size_t item) const override;

  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  std::size_t n_points_;
  std::uint64_t seed_;
};

// Lazy per-item cache of prepared network inputs.
class InputCache {
 public:
  InputCache(const Network& net, const PlaceDatabase& db, std::size_t threads = 1);
  const CloudInput& get(std::size_t item);

 private:
  const Network& net_;
  const PlaceDatabase& db_;
  std::size_t threads_;
  std::vector<std::unique_ptr<CloudInput>> cache_;
  std::mutex mutex_;
};

// Deterministic quadruplet batch: positives share the anchor's place, the
// negatives come from pairwise-distinct other places, and the extra
// negative is disjoint from every sampled place.
std::vector<Quadruplet> sample_quadruplets(const PlaceDatabase& db, std::size_t count,
                                           std::uint64_t seed, std::size_t p_pos = 2,
                                           std::size_t p_neg = 18);

// Hinge value on plain distances (squared L2 between unit descriptors).
double lazy_quadruplet_loss(const std::vector<double>& d_pos, const std::vector<double>& d_neg,
                            const std::vector<double>& d_other, const LossConfig& cfg);

// Differentiable counterpart over descriptor variables.
ad::Var lazy_quadruplet_loss_graph(const ad::Var& anchor, const std::vector<ad::Var>& positives,
                                   const std::vector<ad::Var>& negatives, const ad::Var& other,
                                   const LossConfig& cfg);

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  std::vector<double> epoch_mean_loss;
};

// Adam loop over sampled quadruplets. Writes a checkpoint every epoch when
// checkpoint_path is non-empty and a "epoch,batch,loss" CSV when trace_path
// is non-empty. Gradients reduce in a fixed order, so results are
// independent of cfg.threads.
TrainResult train(const PlaceDatabase& db, const std::vector<std::size_t>& train_items,
                  Network& net, InputCache& cache, const TrainConfig& tcfg,
                  const LossConfig& lcfg, const std::string& checkpoint_path = {},
                  const std::string& trace_path = {});

}  // namespace lpdnet
