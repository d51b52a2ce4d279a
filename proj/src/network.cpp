#include "lpdnet/network.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "lpdnet/kdtree.hpp"

namespace lpdnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Fn>
auto with_stage(const char* stage, Fn&& fn) {
  try {
    return fn();
  } catch (const DataError& e) {
    throw DataError(std::string(stage) + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(std::string(stage) + ": " + e.what());
  }
}

std::vector<std::size_t> scaled_widths(const std::vector<std::size_t>& widths, double factor) {
  std::vector<std::size_t> out;
  out.reserve(widths.size());
  for (auto w : widths)
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(w * factor))));
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw DataError("bad size list: '" + s + "'");
    out.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  if (out.empty()) throw DataError("empty size list");
  return out;
}

}  // namespace

RelationVariant relation_variant_from_string(const std::string& s) {
  if (s == "O") return RelationVariant::kOriginal;
  if (s == "S") return RelationVariant::kSeries;
  if (s == "P") return RelationVariant::kParallel;
  throw DataError("unknown relation variant '" + s + "' (expected O, S, or P)");
}

AggregationVariant aggregation_variant_from_string(const std::string& s) {
  if (s == "PC") return AggregationVariant::kParallelConcat;
  if (s == "PM") return AggregationVariant::kParallelMax;
  if (s == "SF") return AggregationVariant::kSeriesFc;
  throw DataError("unknown aggregation variant '" + s + "' (expected PC, PM, or SF)");
}

std::string to_string(RelationVariant v) {
  switch (v) {
    case RelationVariant::kOriginal: return "O";
    case RelationVariant::kSeries: return "S";
    default: return "P";
  }
}

std::string to_string(AggregationVariant v) {
  switch (v) {
    case AggregationVariant::kParallelConcat: return "PC";
    case AggregationVariant::kParallelMax: return "PM";
    default: return "SF";
  }
}

void NetworkConfig::validate() const {
  auto positive = [](const std::vector<std::size_t>& v, const char* what) {
    if (v.empty()) throw DataError(std::string("NetworkConfig: empty width list for ") + what);
    for (auto w : v)
      if (w == 0) throw DataError(std::string("NetworkConfig: zero width in ") + what);
  };
  positive(fn_mlp, "fn_mlp");
  positive(tnet_mlp, "tnet_mlp");
  positive(tnet_fc, "tnet_fc");
  positive(graph_mlp, "graph_mlp");
  positive(fc_stack, "fc_stack");
  if (n_points == 0) throw DataError("NetworkConfig: n_points must be >= 1");
  if (kf == 0 || kc == 0) throw DataError("NetworkConfig: kf and kc must be >= 1");
  if (kf >= n_points || kc >= n_points)
    throw DataError("NetworkConfig: neighbor counts must be < n_points");
  if (vlad_clusters == 0 || output_dim == 0)
    throw DataError("NetworkConfig: vlad_clusters and output_dim must be >= 1");
  if (graph_iterations == 0) throw DataError("NetworkConfig: graph_iterations must be >= 1");
  neighborhood.validate();
}

NetworkConfig NetworkConfig::desk_scale(double factor, std::size_t n_points) {
  if (!(factor > 0.0)) throw DataError("desk_scale: factor must be > 0");
  NetworkConfig cfg;
  cfg.n_points = n_points;
  cfg.fn_mlp = scaled_widths(cfg.fn_mlp, factor);
  cfg.tnet_mlp = scaled_widths(cfg.tnet_mlp, factor);
  cfg.tnet_fc = scaled_widths(cfg.tnet_fc, factor);
  cfg.graph_mlp = scaled_widths(cfg.graph_mlp, factor);
  cfg.fc_stack = scaled_widths(cfg.fc_stack, factor);
  cfg.vlad_clusters =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(64 * factor)));
  cfg.output_dim = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(256 * factor)));
  cfg.kf = std::min<std::size_t>(cfg.kf, n_points > 1 ? n_points - 1 : 1);
  cfg.kc = std::min<std::size_t>(cfg.kc, n_points > 1 ? n_points - 1 : 1);
  return cfg;
}

void save_network_config(const std::string& path, const NetworkConfig& cfg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write network config: " + path);
  out << "n_points=" << cfg.n_points << '\n';
  out << "fn_mlp=" << join_sizes(cfg.fn_mlp) << '\n';
  out << "tnet_mlp=" << join_sizes(cfg.tnet_mlp) << '\n';
  out << "tnet_fc=" << join_sizes(cfg.tnet_fc) << '\n';
  out << "graph_mlp=" << join_sizes(cfg.graph_mlp) << '\n';
  out << "fc_stack=" << join_sizes(cfg.fc_stack) << '\n';
  out << "kf=" << cfg.kf << '\n';
  out << "kc=" << cfg.kc << '\n';
  out << "relation=" << to_string(cfg.relation) << '\n';
  out << "aggregation=" << to_string(cfg.aggregation) << '\n';
  out << "graph_iterations=" << cfg.graph_iterations << '\n';
  out << "vlad_clusters=" << cfg.vlad_clusters << '\n';
  out << "output_dim=" << cfg.output_dim << '\n';
  out << "use_local_features=" << (cfg.use_local_features ? 1 : 0) << '\n';
  out << "k_min=" << cfg.neighborhood.k_min << '\n';
  out << "k_max=" << cfg.neighborhood.k_max << '\n';
  out << "k_step=" << cfg.neighborhood.k_step << '\n';
}

NetworkConfig load_network_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open network config: " + path);
  NetworkConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("network config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "n_points") cfg.n_points = std::stoull(value);
    else if (key == "fn_mlp") cfg.fn_mlp = parse_sizes(value);
    else if (key == "tnet_mlp") cfg.tnet_mlp = parse_sizes(value);
    else if (key == "tnet_fc") cfg.tnet_fc = parse_sizes(value);
    else if (key == "graph_mlp") cfg.graph_mlp = parse_sizes(value);
    else if (key == "fc_stack") cfg.fc_stack = parse_sizes(value);
    else if (key == "kf") cfg.kf = std::stoull(value);
    else if (key == "kc") cfg.kc = std::stoull(value);
    else if (key == "relation") cfg.relation = relation_variant_from_string(value);
    else if (key == "aggregation") cfg.aggregation = aggregation_variant_from_string(value);
    else if (key == "graph_iterations") cfg.graph_iterations = std::stoull(value);
    else if (key == "vlad_clusters") cfg.vlad_clusters = std::stoull(value);
    else if (key == "output_dim") cfg.output_dim = std::stoull(value);
    else if (key == "use_local_features") cfg.use_local_features = value != "0";
    else if (key == "k_min") cfg.neighborhood.k_min = std::stoull(value);
    else if (key == "k_max") cfg.neighborhood.k_max = std::stoull(value);
    else if (key == "k_step") cfg.neighborhood.k_step = std::stoull(value);
    else throw DataError("network config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Tensor condition_features_for_network(const LocalFeatureMatrix& features) {
  Tensor out({features.n_points, kNumLocalFeatures});
  out.data = features.values;
  for (std::size_t i = 0; i < features.n_points; ++i) {
    double& density = out.data[i * kNumLocalFeatures + 4];
    density = std::log10(1.0 + density) / 10.0;
  }
  return out;
}

std::vector<std::size_t> feature_space_knn(const Tensor& features, std::size_t k) {
  const std::size_t n = features.rows();
  const std::size_t c = features.cols();
  if (k + 1 > n) throw DataError("feature_space_knn: k must be < point count");

  Eigen::Map<const RowMat> f(features.data.data(), n, c);
  RowMat gram = f * f.transpose();
  std::vector<std::size_t> out(n * k);
  std::vector<std::pair<double, std::size_t>> cand(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = std::max(0.0, gram(i, i) + gram(j, j) - 2.0 * gram(i, j));
      cand[j] = {j == i ? std::numeric_limits<double>::infinity() : d, j};
    }
    std::nth_element(cand.begin(), cand.begin() + k, cand.end());
    std::sort(cand.begin(), cand.begin() + k);
    for (std::size_t m = 0; m < k; ++m) out[i * k + m] = cand[m].second;
  }
  // Selection is frozen while a finite-difference trace is active.
  if (ad::SelectionTrace* trace = ad::SelectionTrace::current())
    out = trace->picks(std::move(out));
  return out;
}

Network::Network(NetworkConfig cfg, ad::ParamStore& params)
    : cfg_(std::move(cfg)), params_(&params) {
  cfg_.validate();
  create_params();
}

void Network::create_params() {
  auto& ps = *params_;
  auto dense = [&ps](const std::string& prefix, std::size_t in, std::size_t out) {
    if (!ps.has(prefix + ".w")) {
      ps.create(prefix + ".w", {in, out});
      ps.create(prefix + ".b", {1, out}, ad::Init::kZeros);
    }
  };
  auto transform_params = [&](const std::string& prefix, std::size_t in) {
    std::size_t w = in;
    for (std::size_t i = 0; i < cfg_.tnet_mlp.size(); ++i) {
      dense(prefix + ".mlp" + std::to_string(i), w, cfg_.tnet_mlp[i]);
      w = cfg_.tnet_mlp[i];
    }
    for (std::size_t i = 0; i < cfg_.tnet_fc.size(); ++i) {
      dense(prefix + ".fc" + std::to_string(i), w, cfg_.tnet_fc[i]);
      w = cfg_.tnet_fc[i];
    }
    // Final layer pinned so the initial transform is the identity.
    if (!ps.has(prefix + ".out.w")) {
      ps.create(prefix + ".out.w", {w, in * in}, ad::Init::kZeros);
      Tensor identity({1, in * in});
      for (std::size_t i = 0; i < in; ++i) identity.data[i * in + i] = 1.0;
      ps.create_with(prefix + ".out.b", std::move(identity));
    }
  };

  transform_params("tnet3", 3);

  std::size_t w = 3 + kNumLocalFeatures;
  for (std::size_t i = 0; i < cfg_.fn_mlp.size(); ++i) {
    dense("fn.mlp" + std::to_string(i), w, cfg_.fn_mlp[i]);
    w = cfg_.fn_mlp[i];
  }
  transform_params("ftrans", cfg_.fn_mlp.back());

  auto graph_params = [&](const std::string& prefix, std::size_t in) {
    std::size_t ew = 2 * in;  // edge feature [center ; center - neighbor]
    for (std::size_t i = 0; i < cfg_.graph_mlp.size(); ++i) {
      dense(prefix + ".mlp" + std::to_string(i), ew, cfg_.graph_mlp[i]);
      ew = cfg_.graph_mlp[i];
    }
    return ew;
  };

  const std::size_t feat_dim = cfg_.fn_mlp.back();
  std::size_t agg_out = feat_dim;
  for (std::size_t t = 0; t < cfg_.graph_iterations; ++t)
    agg_out = graph_params("agg.f" + std::to_string(t), agg_out);
  switch (cfg_.aggregation) {
    case AggregationVariant::kSeriesFc:
      agg_out = graph_params("agg.c0", agg_out);
      break;
    case AggregationVariant::kParallelMax: {
      const std::size_t cart = graph_params("agg.c0", feat_dim);
      if (cart != agg_out)
        throw DataError("NetworkConfig: PM requires equal branch output widths");
      break;
    }
    case AggregationVariant::kParallelConcat: {
      const std::size_t cart = graph_params("agg.c0", feat_dim);
      dense("agg.merge", agg_out + cart, cfg_.graph_mlp.back());
      agg_out = cfg_.graph_mlp.back();
      break;
    }
  }

  std::size_t hw = agg_out;
  for (std::size_t i = 0; i < cfg_.fc_stack.size(); ++i) {
    dense("head.fc" + std::to_string(i), hw, cfg_.fc_stack[i]);
    hw = cfg_.fc_stack[i];
  }

  dense("vlad.assign", hw, cfg_.vlad_clusters);
  if (!params_->has("vlad.centers")) params_->create("vlad.centers", {cfg_.vlad_clusters, hw});
  dense("vlad.proj", cfg_.vlad_clusters * hw, cfg_.output_dim);
}

CloudInput Network::prepare(const PointCloud& cloud, std::size_t threads) const {
  if (!cloud.normalized) throw DataError("Network::prepare: cloud must be normalized");
  if (cloud.size() != cfg_.n_points)
    throw DataError("Network::prepare: cloud has " + std::to_string(cloud.size()) +
                    " points, config expects " + std::to_string(cfg_.n_points));

  // Canonical point ordering: lexicographic by (x, y, z). This makes every
  // downstream kNN tie-break independent of the input point order.
  std::vector<std::size_t> order(cloud.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = cloud.points[a];
    const auto& pb = cloud.points[b];
    if (pa.x != pb.x) return pa.x < pb.x;
    if (pa.y != pb.y) return pa.y < pb.y;
    return pa.z < pb.z;
  });

  PointCloud canonical;
  canonical.normalized = true;
  canonical.points.reserve(cloud.size());
  for (auto i : order) canonical.points.push_back(cloud.points[i]);

  CloudInput input;
  input.coords = Tensor({cloud.size(), 3});
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    input.coords.data[i * 3 + 0] = canonical.points[i].x;
    input.coords.data[i * 3 + 1] = canonical.points[i].y;
    input.coords.data[i * 3 + 2] = canonical.points[i].z;
  }

  const LocalFeatureMatrix feats =
      compute_local_features(canonical, cfg_.neighborhood, threads);
  input.local_features = condition_features_for_network(feats);

  std::vector<std::vector<double>> pts(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    pts[i] = {canonical.points[i].x, canonical.points[i].y, canonical.points[i].z};
  const KdTree tree(std::move(pts));
  input.cartesian_knn.resize(cloud.size() * cfg_.kc);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const NeighborList nn = tree.knn(tree.point(i), 3, cfg_.kc, i);
    for (std::size_t m = 0; m < cfg_.kc; ++m) input.cartesian_knn[i * cfg_.kc + m] = nn.indices[m];
  }
  return input;
}

ad::Var Network::transform_net(const std::string& prefix, const ad::Var& input,
                               std::size_t out_dim) const {
  auto& ps = *params_;
  ad::Var h = input;
  for (std::size_t i = 0; i < cfg_.tnet_mlp.size(); ++i) {
    const std::string p = prefix + ".mlp" + std::to_string(i);
    h = ad::relu(ad::shared_mlp(h, ps.get(p + ".w"), ps.get(p + ".b")));
  }
  h = ad::maxpool_points(h);
  for (std::size_t i = 0; i < cfg_.tnet_fc.size(); ++i) {
    const std::string p = prefix + ".fc" + std::to_string(i);
    h = ad::relu(ad::fc(h, ps.get(p + ".w"), ps.get(p + ".b")));
  }
  h = ad::fc(h, ps.get(prefix + ".out.w"), ps.get(prefix + ".out.b"));
  return ad::reshape(h, {out_dim, out_dim});
}

ad::Var Network::input_transform(const ad::Var& coords) const {
  return with_stage("input_transform", [&] {
    if (coords->value.cols() != 3) throw DataError("coords must be N x 3");
    const ad::Var m = transform_net("tnet3", coords, 3);
    return ad::matmul(coords, m);
  });
}

std::pair<ad::Var, ad::Var> Network::feature_network(const ad::Var& coords,
                                                     const ad::Var& local_feats) const {
  return with_stage("feature_network", [&]() -> std::pair<ad::Var, ad::Var> {
    auto& ps = *params_;
    const ad::Var transformed = input_transform(coords);
    ad::Var h = ad::concat_cols(transformed, local_feats);
    for (std::size_t i = 0; i < cfg_.fn_mlp.size(); ++i) {
      const std::string p = "fn.mlp" + std::to_string(i);
      h = ad::relu(ad::shared_mlp(h, ps.get(p + ".w"), ps.get(p + ".b")));
    }
    const ad::Var f_plain = h;
    const ad::Var m = transform_net("ftrans", f_plain, cfg_.fn_mlp.back());
    const ad::Var f_transformed = ad::matmul(f_plain, m);
    switch (cfg_.relation) {
      case RelationVariant::kOriginal: return {f_plain, f_plain};
      case RelationVariant::kSeries: return {f_transformed, f_transformed};
      default: return {f_plain, f_transformed};  // P: plain features, transformed relations
    }
  });
}

ad::Var Network::graph_block(const ad::Var& features, const std::vector<std::size_t>& neighbors,
                             std::size_t k, const std::string& prefix) const {
  return with_stage("graph_block", [&] {
    const std::size_t n = features->value.rows();
    if (k >= n) throw DataError("k must be < point count");
    if (neighbors.size() != n * k) throw DataError("neighbor list size mismatch");
    auto& ps = *params_;
    ad::Var h = ad::edge_features(features, neighbors, k);
    for (std::size_t i = 0; i < cfg_.graph_mlp.size(); ++i) {
      const std::string p = prefix + ".mlp" + std::to_string(i);
      h = ad::relu(ad::shared_mlp(h, ps.get(p + ".w"), ps.get(p + ".b")));
    }
    return ad::max_over_groups(h, n, k);
  });
}

ad::Var Network::aggregate(const ad::Var& features, const ad::Var& relation_source,
                           const std::vector<std::size_t>& cartesian_knn) const {
  return with_stage("aggregate", [&] {
    ad::Var h = features;
    for (std::size_t t = 0; t < cfg_.graph_iterations; ++t) {
      // First iteration connects by the relation source; later iterations
      // rebuild the dynamic graph from the current features.
      const Tensor& knn_src = (t == 0) ? relation_source->value : h->value;
      const auto nbr = feature_space_knn(knn_src, cfg_.kf);
      h = graph_block(h, nbr, cfg_.kf, "agg.f" + std::to_string(t));
    }
    switch (cfg_.aggregation) {
      case AggregationVariant::kSeriesFc:
        return graph_block(h, cartesian_knn, cfg_.kc, "agg.c0");
      case AggregationVariant::kParallelMax: {
        const ad::Var cart = graph_block(features, cartesian_knn, cfg_.kc, "agg.c0");
        return ad::max_elementwise(h, cart);
      }
      default: {  // PC
        const ad::Var cart = graph_block(features, cartesian_knn, cfg_.kc, "agg.c0");
        const ad::Var merged = ad::concat_cols(h, cart);
        auto& ps = *params_;
        return ad::relu(ad::shared_mlp(merged, ps.get("agg.merge.w"), ps.get("agg.merge.b")));
      }
    }
  });
}

ad::Var Network::netvlad(const ad::Var& point_features) const {
  return with_stage("netvlad", [&] {
    auto& ps = *params_;
    const std::size_t clusters = cfg_.vlad_clusters;
    const ad::Var scores =
        ad::add_bias(ad::matmul(point_features, ps.get("vlad.assign.w")), ps.get("vlad.assign.b"));
    const ad::Var assign = ad::softmax_rows(scores);  // N x K
    const ad::Var weighted = ad::matmul_tn(assign, point_features);  // K x C
    const ad::Var mass = ad::reshape(ad::colsum(assign), {clusters, 1});
    const ad::Var residual = ad::sub(weighted, ad::scale_rows(ps.get("vlad.centers"), mass));
    const ad::Var intra = ad::l2_normalize_rows(residual);
    const ad::Var flat =
        ad::reshape(intra, {std::size_t{1}, clusters * point_features->value.cols()});
    const ad::Var projected = ad::fc(flat, ps.get("vlad.proj.w"), ps.get("vlad.proj.b"));
    return ad::l2_normalize_rows(projected);
  });
}

ad::Var Network::forward(const CloudInput& input) const {
  auto& ps = *params_;
  const ad::Var coords = ad::constant(input.coords);
  Tensor feats = input.local_features;
  if (!cfg_.use_local_features) std::fill(feats.data.begin(), feats.data.end(), 0.0);
  const ad::Var local = ad::constant(std::move(feats));

  const auto [features, relation_source] = feature_network(coords, local);
  ad::Var h = aggregate(features, relation_source, input.cartesian_knn);
  h = with_stage("head", [&] {
    for (std::size_t i = 0; i < cfg_.fc_stack.size(); ++i) {
      const std::string p = "head.fc" + std::to_string(i);
      h = ad::relu(ad::shared_mlp(h, ps.get(p + ".w"), ps.get(p + ".b")));
    }
    return ad::l2_normalize_rows(h);
  });
  return netvlad(h);
}

GlobalDescriptor Network::descriptor(const CloudInput& input) const {
  const ad::Var out = forward(input);
  GlobalDescriptor d;
  d.values = out->value.data;
  return d;
}

}  // namespace lpdnet
