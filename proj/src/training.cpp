#include "lpdnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

namespace lpdnet {

namespace {

constexpr std::uint64_t kTagPlace = 0x70ac;
constexpr std::uint64_t kTagObservation = 0x0b5e;
constexpr std::uint64_t kTagSampler = 0x5a3b;
constexpr std::uint64_t kTagEpoch = 0xe70c;

ad::Var squared_distance(const ad::Var& a, const ad::Var& b) {
  const ad::Var diff = ad::sub(a, b);
  return ad::sum_all(ad::mul(diff, diff));
}

// Run fn(b) for b in [0, count) on up to `threads` workers. Static block
// partition; output slots are disjoint so results are thread-count
// independent.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
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

SyntheticPlaceDatabase::SyntheticPlaceDatabase(std::size_t places, std::size_t observations,
                                               std::size_t n_points, std::uint64_t seed,
                                               double rotation_deg, double noise_frac)
    : places_(places),
      observations_(observations),
      n_points_(n_points),
      seed_(seed),
      rotation_deg_(rotation_deg),
      noise_frac_(noise_frac) {
  if (places_ == 0 || observations_ == 0)
    throw DataError("SyntheticPlaceDatabase: places and observations must be >= 1");
}

std::string SyntheticPlaceDatabase::id(std::size_t item) const {
  return "p" + std::to_string(item / observations_) + "_o" + std::to_string(item % observations_);
}

bool SyntheticPlaceDatabase::same_place(std::size_t a, std::size_t b) const {
  return a / observations_ == b / observations_;
}

std::uint64_t SyntheticPlaceDatabase::place_seed(std::size_t place) const {
  return mix_seed(seed_, kTagPlace + place);
}

std::uint64_t SyntheticPlaceDatabase::observation_seed(std::size_t place,
                                                       std::size_t observation) const {
  return mix_seed(seed_, kTagObservation + place * 1000003ULL + observation);
}

PointCloud SyntheticPlaceDatabase::cloud(std::size_t item) const {
  const std::size_t place = item / observations_;
  const std::size_t obs = item % observations_;
  // The generator needs a minimum point budget; tiny test profiles sample
  // down from it.
  const std::size_t base_n = std::max<std::size_t>(64, n_points_);
  PointCloud c = generate_synthetic_place(place_seed(place), observation_seed(place, obs), base_n,
                                          rotation_deg_, noise_frac_);
  if (n_points_ < base_n) c = downsample_random(c, n_points_, mix_seed(seed_, 0xd5 + item));
  return c;
}

ManifestPlaceDatabase::ManifestPlaceDatabase(DatasetManifest manifest, std::size_t n_points,
                                             std::uint64_t seed)
    : manifest_(std::move(manifest)), n_points_(n_points), seed_(seed) {
  if (manifest_.records.empty()) throw DataError("ManifestPlaceDatabase: empty manifest");
}

bool ManifestPlaceDatabase::same_place(std::size_t a, std::size_t b) const {
  const auto& ra = manifest_.records[a];
  const auto& rb = manifest_.records[b];
  const double dn = ra.northing - rb.northing;
  const double de = ra.easting - rb.easting;
  return dn * dn + de * de <= manifest_.positive_radius * manifest_.positive_radius;
}

PointCloud ManifestPlaceDatabase::cloud(std::size_t item) const {
  PointCloud c = load_cloud(manifest_.records[item].cloud_path);
  if (c.size() > n_points_) c = downsample_random(c, n_points_, mix_seed(seed_, item));
  if (c.size() != n_points_)
    throw DataError("cloud '" + manifest_.records[item].id + "' has " + std::to_string(c.size()) +
                    " points, need " + std::to_string(n_points_));
  return normalize_cloud(c);
}

InputCache::InputCache(const Network& net, const PlaceDatabase& db, std::size_t threads)
    : net_(net), db_(db), threads_(threads), cache_(db.size()) {}

const CloudInput& InputCache::get(std::size_t item) {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (cache_[item]) return *cache_[item];
  }
  auto prepared = std::make_unique<CloudInput>(net_.prepare(db_.cloud(item), threads_));
  std::lock_guard<std::mutex> lock(mutex_);
  if (!cache_[item]) cache_[item] = std::move(prepared);
  return *cache_[item];
}

std::vector<Quadruplet> sample_quadruplets(const PlaceDatabase& db, std::size_t count,
                                           std::uint64_t seed, std::size_t p_pos,
                                           std::size_t p_neg) {
  const std::size_t n = db.size();
  if (n == 0) throw DataError("sample_quadruplets: empty database");
  Rng rng(mix_seed(seed, kTagSampler));

  auto shuffled_items = [&rng, n]() {
    std::vector<std::size_t> items(n);
    std::iota(items.begin(), items.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.below(i));
      std::swap(items[i - 1], items[j]);
    }
    return items;
  };

  std::vector<Quadruplet> batch;
  batch.reserve(count);
  for (std::size_t q = 0; q < count; ++q) {
    Quadruplet quad;
    quad.anchor = static_cast<std::size_t>(rng.below(n));

    std::vector<std::size_t> pos_pool;
    for (std::size_t i = 0; i < n; ++i)
      if (i != quad.anchor && db.same_place(quad.anchor, i)) pos_pool.push_back(i);
    if (pos_pool.size() < p_pos)
      throw DataError("sample_quadruplets: anchor " + db.id(quad.anchor) + " has only " +
                      std::to_string(pos_pool.size()) + " positives, need " +
                      std::to_string(p_pos));
    for (std::size_t i = 0; i < p_pos; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(pos_pool.size() - i));
      std::swap(pos_pool[i], pos_pool[j]);
      quad.positives.push_back(pos_pool[i]);
    }

    // Negatives from pairwise-distinct places, none matching the anchor's.
    for (const std::size_t cand : shuffled_items()) {
      if (quad.negatives.size() == p_neg) break;
      if (db.same_place(quad.anchor, cand)) continue;
      bool clash = false;
      for (const std::size_t taken : quad.negatives)
        if (db.same_place(taken, cand)) {
          clash = true;
          break;
        }
      if (!clash) quad.negatives.push_back(cand);
    }
    if (quad.negatives.size() < p_neg) throw DataError("sample_quadruplets: insufficient negatives");

    bool found_other = false;
    for (const std::size_t cand : shuffled_items()) {
      if (db.same_place(quad.anchor, cand)) continue;
      bool clash = false;
      for (const std::size_t taken : quad.negatives)
        if (db.same_place(taken, cand)) {
          clash = true;
          break;
        }
      if (clash) continue;
      quad.other_negative = cand;
      found_other = true;
      break;
    }
    if (!found_other)
      throw DataError("sample_quadruplets: no place left for the other-negative sample");
    batch.push_back(std::move(quad));
  }
  return batch;
}

double lazy_quadruplet_loss(const std::vector<double>& d_pos, const std::vector<double>& d_neg,
                            const std::vector<double>& d_other, const LossConfig& cfg) {
  cfg.validate();
  if (d_pos.empty() || d_neg.empty() || d_other.empty())
    throw DataError("lazy_quadruplet_loss: empty distance list");
  for (double d : d_pos)
    if (d < 0.0) throw DataError("lazy_quadruplet_loss: negative distance");
  const double best_pos = *std::min_element(d_pos.begin(), d_pos.end());
  double first = 0.0, second = 0.0;
  for (double d : d_neg) first = std::max(first, cfg.alpha + best_pos - d);
  for (double d : d_other) second = std::max(second, cfg.beta + best_pos - d);
  return first + second;
}

ad::Var lazy_quadruplet_loss_graph(const ad::Var& anchor, const std::vector<ad::Var>& positives,
                                   const std::vector<ad::Var>& negatives, const ad::Var& other,
                                   const LossConfig& cfg) {
  cfg.validate();
  if (positives.empty() || negatives.empty())
    throw DataError("lazy_quadruplet_loss_graph: empty positive or negative list");

  // Best (minimum) positive distance; lazy selection keeps the gradient on
  // the chosen pair only. Selections respect an active finite-difference
  // trace like every other discrete choice.
  ad::SelectionTrace* trace = ad::SelectionTrace::current();
  std::vector<ad::Var> pos_dists;
  std::size_t best_idx = 0;
  for (std::size_t i = 0; i < positives.size(); ++i) {
    pos_dists.push_back(squared_distance(anchor, positives[i]));
    if (pos_dists[i]->value.scalar() < pos_dists[best_idx]->value.scalar()) best_idx = i;
  }
  if (trace) best_idx = trace->pick(best_idx);
  const ad::Var best_pos = pos_dists[best_idx];

  auto hinge_max = [&](const ad::Var& ref, double margin) {
    std::vector<ad::Var> terms;
    std::size_t top = 0;
    for (std::size_t i = 0; i < negatives.size(); ++i) {
      terms.push_back(
          ad::relu(ad::add_scalar(ad::sub(best_pos, squared_distance(ref, negatives[i])), margin)));
      if (terms[i]->value.scalar() > terms[top]->value.scalar()) top = i;
    }
    if (trace) top = trace->pick(top);
    return terms[top];
  };

  const ad::Var first = hinge_max(anchor, cfg.alpha);
  const ad::Var second = hinge_max(other, cfg.beta);
  return ad::add(first, second);
}

namespace {

// Gradients of one quadruplet, evaluated with per-branch sinks and reduced
// in branch order. Returns the loss value.
double quadruplet_gradients(Network& net, InputCache& cache, const Quadruplet& quad,
                            const LossConfig& lcfg, std::size_t threads, double grad_scale,
                            std::map<std::string, Tensor>& grad_accum) {
  std::vector<std::size_t> items;
  items.push_back(quad.anchor);
  items.insert(items.end(), quad.positives.begin(), quad.positives.end());
  items.insert(items.end(), quad.negatives.begin(), quad.negatives.end());
  items.push_back(quad.other_negative);
  const std::size_t branches = items.size();

  // Inputs first (cache fills are mutex-guarded; do them before the
  // parallel phase so workers only read).
  std::vector<const CloudInput*> inputs(branches);
  for (std::size_t b = 0; b < branches; ++b) inputs[b] = &cache.get(items[b]);

  std::vector<ad::Var> descriptors(branches);
  parallel_for(branches, threads,
               [&](std::size_t b) { descriptors[b] = net.forward(*inputs[b]); });

  // Loss over detached copies of the descriptor values.
  std::vector<ad::Var> heads(branches);
  for (std::size_t b = 0; b < branches; ++b)
    heads[b] = ad::leaf(descriptors[b]->value, true);

  const std::size_t p_pos = quad.positives.size();
  const std::size_t p_neg = quad.negatives.size();
  std::vector<ad::Var> pos_heads(heads.begin() + 1, heads.begin() + 1 + p_pos);
  std::vector<ad::Var> neg_heads(heads.begin() + 1 + p_pos, heads.begin() + 1 + p_pos + p_neg);
  const ad::Var loss =
      lazy_quadruplet_loss_graph(heads.front(), pos_heads, neg_heads, heads.back(), lcfg);
  const double loss_value = loss->value.scalar();
  ad::backward(loss);

  // Push the per-descriptor gradients through each branch tape.
  std::vector<ad::GradSink> sinks(branches);
  parallel_for(branches, threads, [&](std::size_t b) {
    const Tensor& seed = heads[b]->grad;
    if (seed.shape.empty()) return;
    bool nonzero = false;
    for (double v : seed.data)
      if (v != 0.0) {
        nonzero = true;
        break;
      }
    if (!nonzero) return;
    ad::backward(descriptors[b], &sinks[b], &seed);
  });

  for (const auto& [name, param] : net.params().all()) {
    const ad::Node* key = param.get();
    for (std::size_t b = 0; b < branches; ++b) {
      auto it = sinks[b].find(key);
      if (it == sinks[b].end()) continue;
      Tensor& acc = grad_accum[name];
      if (acc.shape.empty()) acc = Tensor(param->value.shape);
      for (std::size_t i = 0; i < acc.data.size(); ++i)
        acc.data[i] += grad_scale * it->second.data[i];
    }
  }
  return loss_value;
}

}  // namespace

TrainResult train(const PlaceDatabase& db, const std::vector<std::size_t>& train_items,
                  Network& net, InputCache& cache, const TrainConfig& tcfg,
                  const LossConfig& lcfg, const std::string& checkpoint_path,
                  const std::string& trace_path) {
  lcfg.validate();
  if (!(tcfg.learning_rate >= 0.0)) throw DataError("train: learning rate must be >= 0");
  if (train_items.empty()) throw DataError("train: no training items");

  // Restriction of the database to the training split, so sampling never
  // touches held-out observations.
  class SubsetDb : public PlaceDatabase {
   public:
    SubsetDb(const PlaceDatabase& base, const std::vector<std::size_t>& items)
        : base_(base), items_(items) {}
    std::size_t size() const override { return items_.size(); }
    std::string id(std::size_t item) const override { return base_.id(items_[item]); }
    bool same_place(std::size_t a, std::size_t b) const override {
      return base_.same_place(items_[a], items_[b]);
    }
    PointCloud cloud(std::size_t item) const override { return base_.cloud(items_[item]); }
    std::size_t to_base(std::size_t item) const { return items_[item]; }

   private:
    const PlaceDatabase& base_;
    const std::vector<std::size_t>& items_;
  };
  SubsetDb subset(db, train_items);

  auto& ps = net.params();
  std::map<std::string, Tensor> adam_m, adam_v;
  for (const auto& [name, p] : ps.all()) {
    adam_m[name] = Tensor(p->value.shape);
    adam_v[name] = Tensor(p->value.shape);
  }
  std::uint64_t adam_step = 0;

  TrainResult result;
  const std::size_t quads_per_epoch =
      tcfg.quads_per_epoch > 0 ? tcfg.quads_per_epoch : subset.size();
  const std::size_t batches =
      (quads_per_epoch + tcfg.batch_quadruplets - 1) / tcfg.batch_quadruplets;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    double epoch_loss_sum = 0.0;
    std::size_t epoch_quads = 0;
    for (std::size_t batch = 0; batch < batches; ++batch) {
      const std::size_t want = std::min(tcfg.batch_quadruplets,
                                        quads_per_epoch - batch * tcfg.batch_quadruplets);
      const auto quads = sample_quadruplets(
          subset, want, mix_seed(tcfg.seed, kTagEpoch + epoch * 1000003ULL + batch), tcfg.p_pos,
          tcfg.p_neg);

      std::map<std::string, Tensor> grad_accum;
      double batch_loss = 0.0;
      for (const auto& q : quads) {
        // Map subset indices back to database items for the shared cache.
        Quadruplet mapped;
        mapped.anchor = subset.to_base(q.anchor);
        for (auto p : q.positives) mapped.positives.push_back(subset.to_base(p));
        for (auto n : q.negatives) mapped.negatives.push_back(subset.to_base(n));
        mapped.other_negative = subset.to_base(q.other_negative);
        batch_loss += quadruplet_gradients(net, cache, mapped, lcfg, tcfg.threads,
                                           1.0 / static_cast<double>(quads.size()), grad_accum);
      }
      batch_loss /= static_cast<double>(quads.size());
      if (!std::isfinite(batch_loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(batch));

      ++adam_step;
      const double bc1 = 1.0 - std::pow(tcfg.adam_beta1, static_cast<double>(adam_step));
      const double bc2 = 1.0 - std::pow(tcfg.adam_beta2, static_cast<double>(adam_step));
      for (const auto& [name, param] : ps.all()) {
        auto it = grad_accum.find(name);
        if (it == grad_accum.end()) continue;
        Tensor& m = adam_m[name];
        Tensor& v = adam_v[name];
        for (std::size_t i = 0; i < param->value.data.size(); ++i) {
          const double g = it->second.data[i];
          m.data[i] = tcfg.adam_beta1 * m.data[i] + (1.0 - tcfg.adam_beta1) * g;
          v.data[i] = tcfg.adam_beta2 * v.data[i] + (1.0 - tcfg.adam_beta2) * g * g;
          const double update = tcfg.learning_rate * (m.data[i] / bc1) /
                                (std::sqrt(v.data[i] / bc2) + tcfg.adam_eps);
          param->value.data[i] -= update;
        }
      }

      result.trace.push_back({epoch, batch, batch_loss});
      epoch_loss_sum += batch_loss * static_cast<double>(quads.size());
      epoch_quads += quads.size();
    }
    result.epoch_mean_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_quads));
    if (!checkpoint_path.empty()) ps.save(checkpoint_path);
  }

  if (!trace_path.empty()) {
    std::ofstream out(trace_path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write loss trace: " + trace_path);
    out << "epoch,batch,loss\n";
    for (const auto& row : result.trace)
      out << row.epoch << ',' << row.batch << ',' << format_double(row.loss) << '\n';
  }
  return result;
}

}  // namespace lpdnet
