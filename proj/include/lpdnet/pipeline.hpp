#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lpdnet/network.hpp"
#include "lpdnet/retrieval.hpp"
#include "lpdnet/training.hpp"

namespace lpdnet {

// Descriptors for a list of database items; forwards run in parallel up to
// `threads`, output order is the item order.
std::vector<std::vector<double>> compute_descriptors(const Network& net, InputCache& cache,
                                                     const std::vector<std::size_t>& items,
                                                     std::size_t threads = 1);

// Index over the given items of a database (ids from the database).
DescriptorIndex build_index(const Network& net, const PlaceDatabase& db, InputCache& cache,
                            const std::vector<std::size_t>& items, std::size_t threads = 1);

// Held-out retrieval on a synthetic places x observations grid: the first
// train_observations of each place form the database, the rest query it.
RecallReport evaluate_synthetic(const Network& net, const SyntheticPlaceDatabase& db,
                                InputCache& cache, std::size_t train_observations,
                                const std::vector<std::size_t>& ns, std::size_t threads = 1);

// All-vs-all retrieval over a manifest (each record queries the rest;
// self-match excluded); ground truth by positive radius.
RecallReport evaluate_manifest(const Network& net, const ManifestPlaceDatabase& db,
                               InputCache& cache, const std::vector<std::size_t>& ns,
                               std::size_t threads = 1);

// Rotation + noise robustness protocol: the index holds each place's
// unperturbed base observation; per angle and repeat, the same observation
// is re-generated rotated with noise_frac replacement noise and queried
// top-1. Reports mean and max mistake counts over the repeat seeds.
std::vector<RobustnessRow> robustness_eval(const Network& net, const SyntheticPlaceDatabase& db,
                                           InputCache& cache,
                                           const std::vector<double>& angles_deg,
                                           double noise_frac,
                                           const std::vector<std::uint64_t>& repeat_seeds,
                                           std::size_t threads = 1);

}  // namespace lpdnet
