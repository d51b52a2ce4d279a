#include "lpdnet/pipeline.hpp"

#include <algorithm>
#include <mutex>
#include <thread>

namespace lpdnet {

namespace {

template <typename Fn>
void parallel_items(std::size_t count, std::size_t threads, Fn&& fn) {
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, count));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  const std::size_t chunk = (count + n_threads - 1) / n_threads;
  for (std::size_t t = 0; t < n_threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<std::vector<double>> compute_descriptors(const Network& net, InputCache& cache,
                                                     const std::vector<std::size_t>& items,
                                                     std::size_t threads) {
  // Fill the cache first; cache fills are serialized by a mutex.
  for (auto item : items) cache.get(item);
  std::vector<std::vector<double>> out(items.size());
  parallel_items(items.size(), threads, [&](std::size_t i) {
    out[i] = net.descriptor(cache.get(items[i])).values;
  });
  return out;
}

DescriptorIndex build_index(const Network& net, const PlaceDatabase& db, InputCache& cache,
                            const std::vector<std::size_t>& items, std::size_t threads) {
  const auto descriptors = compute_descriptors(net, cache, items, threads);
  DescriptorIndex index;
  const auto* manifest_db = dynamic_cast<const ManifestPlaceDatabase*>(&db);
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::optional<std::pair<double, double>> position;
    if (manifest_db) {
      const auto& rec = manifest_db->manifest().records[items[i]];
      position = std::make_pair(rec.northing, rec.easting);
    }
    index.add(db.id(items[i]), descriptors[i], position);
  }
  return index;
}

RecallReport evaluate_synthetic(const Network& net, const SyntheticPlaceDatabase& db,
                                InputCache& cache, std::size_t train_observations,
                                const std::vector<std::size_t>& ns, std::size_t threads) {
  if (train_observations == 0 || train_observations >= db.observations())
    throw DataError("evaluate_synthetic: train_observations must split the observations");

  std::vector<std::size_t> database_items, query_items;
  for (std::size_t p = 0; p < db.places(); ++p) {
    for (std::size_t o = 0; o < db.observations(); ++o) {
      const std::size_t item = p * db.observations() + o;
      (o < train_observations ? database_items : query_items).push_back(item);
    }
  }

  const DescriptorIndex index = build_index(net, db, cache, database_items, threads);
  std::map<std::string, std::string> place_key_of;
  for (auto item : database_items)
    place_key_of[db.id(item)] = "p" + std::to_string(db.place_of(item));

  const auto query_descriptors = compute_descriptors(net, cache, query_items, threads);
  std::vector<QueryTruth> queries(query_items.size());
  for (std::size_t i = 0; i < query_items.size(); ++i) {
    queries[i].descriptor = query_descriptors[i];
    queries[i].place_key = "p" + std::to_string(db.place_of(query_items[i]));
  }
  return recall_at_n(queries, index, ns, 0.0, place_key_of, false);
}

RecallReport evaluate_manifest(const Network& net, const ManifestPlaceDatabase& db,
                               InputCache& cache, const std::vector<std::size_t>& ns,
                               std::size_t threads) {
  std::vector<std::size_t> items(db.size());
  for (std::size_t i = 0; i < items.size(); ++i) items[i] = i;
  const DescriptorIndex index = build_index(net, db, cache, items, threads);

  std::vector<QueryTruth> queries(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& rec = db.manifest().records[i];
    queries[i].descriptor.assign(index.descriptor(i), index.descriptor(i) + index.dimension());
    queries[i].position = std::make_pair(rec.northing, rec.easting);
    queries[i].index_id = rec.id;
  }
  return recall_at_n(queries, index, ns, db.manifest().positive_radius, {}, true);
}

std::vector<RobustnessRow> robustness_eval(const Network& net, const SyntheticPlaceDatabase& db,
                                           InputCache& cache,
                                           const std::vector<double>& angles_deg,
                                           double noise_frac,
                                           const std::vector<std::uint64_t>& repeat_seeds,
                                           std::size_t threads) {
  if (repeat_seeds.empty()) throw DataError("robustness_eval: need at least one repeat seed");
  const std::size_t places = db.places();
  const std::size_t n_points = net.config().n_points;

  // Index the unperturbed base observation of every place.
  std::vector<std::size_t> base_items(places);
  for (std::size_t p = 0; p < places; ++p) base_items[p] = p * db.observations();
  const DescriptorIndex index = build_index(net, db, cache, base_items, threads);

  std::vector<RobustnessRow> rows;
  rows.reserve(angles_deg.size());
  for (const double angle : angles_deg) {
    double sum_mistakes = 0.0;
    double max_mistakes = 0.0;
    for (const std::uint64_t repeat_seed : repeat_seeds) {
      std::vector<std::size_t> wrong(places, 0);
      parallel_items(places, threads, [&](std::size_t p) {
        PointCloud query = generate_synthetic_place(db.place_seed(p), db.observation_seed(p, 0),
                                                    n_points, angle, 0.0);
        replace_with_noise(query, noise_frac, mix_seed(repeat_seed, p));
        const CloudInput input = net.prepare(query);
        const GlobalDescriptor d = net.descriptor(input);
        const auto hits = query_topn(index, d.values, 1);
        if (hits[0].id != db.id(base_items[p])) wrong[p] = 1;
      });
      std::size_t mistakes = 0;
      for (auto w : wrong) mistakes += w;
      sum_mistakes += static_cast<double>(mistakes);
      max_mistakes = std::max(max_mistakes, static_cast<double>(mistakes));
    }
    rows.push_back({angle, sum_mistakes / static_cast<double>(repeat_seeds.size()),
                    max_mistakes});
  }
  return rows;
}

}  // namespace lpdnet
