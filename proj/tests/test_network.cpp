#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "lpdnet/gradcheck.hpp"
#include "lpdnet/network.hpp"

using namespace lpdnet;
using ad::Var;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig cfg = gradcheck_config();  // 32-point toy profile
  return cfg;
}

CloudInput prepared_scene(const Network& net, std::uint64_t place = 3, std::uint64_t obs = 1) {
  const std::size_t n = net.config().n_points;
  PointCloud cloud = generate_synthetic_place(place, obs, std::max<std::size_t>(64, n), 0.0, 0.0);
  if (cloud.size() > n) cloud = downsample_random(cloud, n, 17);
  return net.prepare(cloud);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("input transform is the identity at initialization") {
  ad::ParamStore ps(42);
  Network net(tiny_config(), ps);
  const CloudInput in = prepared_scene(net);
  const Var coords = ad::constant(in.coords);
  const Var out = net.input_transform(coords);
  REQUIRE(out->value.shape == std::vector<std::size_t>{32, 3});
  CHECK(out->value.data == in.coords.data);
}

TEST_CASE("input transform output shape holds for perturbed parameters") {
  ad::ParamStore ps(42);
  Network net(tiny_config(), ps);
  // Knock the final layer away from the identity initialization.
  Tensor& w = ps.get("tnet3.out.w")->value;
  Rng rng(5);
  for (auto& v : w.data) v = rng.uniform(-0.2, 0.2);
  const CloudInput in = prepared_scene(net);
  const Var out = net.input_transform(ad::constant(in.coords));
  REQUIRE(out->value.shape == std::vector<std::size_t>{32, 3});
  CHECK(out->value.data != in.coords.data);
}

TEST_CASE("relation variants share relations or features per structure") {
  NetworkConfig base = tiny_config();
  ad::ParamStore ps(7);
  Network net(base, ps);
  // Perturb the 64-transform so the variants can differ.
  Rng rng(9);
  for (auto& v : ps.get("ftrans.out.w")->value.data) v = rng.uniform(-0.3, 0.3);
  const CloudInput in = prepared_scene(net);
  const Var coords = ad::constant(in.coords);
  const Var feats = ad::constant(in.local_features);

  NetworkConfig cfg_p = base;
  cfg_p.relation = RelationVariant::kParallel;
  NetworkConfig cfg_s = base;
  cfg_s.relation = RelationVariant::kSeries;
  NetworkConfig cfg_o = base;
  cfg_o.relation = RelationVariant::kOriginal;
  Network net_p(cfg_p, ps), net_s(cfg_s, ps), net_o(cfg_o, ps);

  const auto [fp, rp] = net_p.feature_network(coords, feats);
  const auto [fs, rs] = net_s.feature_network(coords, feats);
  const auto [fo, ro] = net_o.feature_network(coords, feats);

  CHECK(rp->value.data == rs->value.data);   // P and S share transformed relations
  CHECK(fp->value.data != fs->value.data);   // S features transformed, P not
  CHECK(fp->value.data == fo->value.data);   // P and O share plain features
  CHECK(ro->value.data == fo->value.data);   // O relations come from the plain features
  CHECK(rp->value.data != ro->value.data);
}

TEST_CASE("variants coincide while the feature transform is the identity") {
  NetworkConfig base = tiny_config();
  ad::ParamStore ps(11);
  Network net(base, ps);
  const CloudInput in = prepared_scene(net);
  const Var coords = ad::constant(in.coords);
  const Var feats = ad::constant(in.local_features);
  for (auto relation : {RelationVariant::kOriginal, RelationVariant::kSeries,
                        RelationVariant::kParallel}) {
    NetworkConfig cfg = base;
    cfg.relation = relation;
    Network variant(cfg, ps);
    const auto [f, r] = variant.feature_network(coords, feats);
    CHECK(f->value.data == r->value.data);
  }
}

TEST_CASE("graph block with identical features gives identical rows") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(13);
  Network net(cfg, ps);
  Tensor same({10, 8});
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 8; ++c) same.at(r, c) = 0.3 * static_cast<double>(c) - 0.5;
  // Arbitrary neighbor assignment; edge differences vanish regardless.
  std::vector<std::size_t> nbr(10 * 3);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t m = 0; m < 3; ++m) nbr[i * 3 + m] = (i + m + 1) % 10;
  const Var out = net.graph_block(ad::constant(same), nbr, 3, "agg.f0");
  for (std::size_t r = 1; r < 10; ++r)
    for (std::size_t c = 0; c < out->value.cols(); ++c)
      CHECK(out->value.at(r, c) == out->value.at(0, c));
}

TEST_CASE("graph block with k=1 pools a single edge") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(17);
  Network net(cfg, ps);
  Rng rng(3);
  Tensor f({6, 8});
  for (auto& v : f.data) v = rng.uniform(-1, 1);
  std::vector<std::size_t> nbr(6);
  for (std::size_t i = 0; i < 6; ++i) nbr[i] = (i + 1) % 6;
  const Var pooled = net.graph_block(ad::constant(f), nbr, 1, "agg.f0");

  // Hand composition: edge mlp on the single edge, no pooling competition.
  const Var edges = ad::edge_features(ad::constant(f), nbr, 1);
  Var h = edges;
  for (int i = 0; i < 2; ++i) {
    const std::string p = "agg.f0.mlp" + std::to_string(i);
    h = ad::relu(ad::shared_mlp(h, ps.get(p + ".w"), ps.get(p + ".b")));
  }
  CHECK(pooled->value.data == h->value.data);
}

TEST_CASE("graph block matches an explicit per-point loop") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(19);
  Network net(cfg, ps);
  Rng rng(8);
  const std::size_t n = 8, k = 3, c = 8;
  Tensor f({n, c});
  for (auto& v : f.data) v = rng.uniform(-1, 1);

  // Explicit kNN by sorted squared distance, self excluded, ties by index.
  std::vector<std::size_t> nbr(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d = 0;
      for (std::size_t m = 0; m < c; ++m) {
        const double diff = f.at(i, m) - f.at(j, m);
        d += diff * diff;
      }
      cand.emplace_back(d, j);
    }
    std::sort(cand.begin(), cand.end());
    for (std::size_t m = 0; m < k; ++m) nbr[i * k + m] = cand[m].second;
  }
  CHECK(feature_space_knn(f, k) == nbr);

  const Var out = net.graph_block(ad::constant(f), nbr, k, "agg.f0");

  // Independent loop: per point, per edge, explicit mlp arithmetic, max.
  const Tensor& w0 = ps.get("agg.f0.mlp0.w")->value;
  const Tensor& b0 = ps.get("agg.f0.mlp0.b")->value;
  const Tensor& w1 = ps.get("agg.f0.mlp1.w")->value;
  const Tensor& b1 = ps.get("agg.f0.mlp1.b")->value;
  const std::size_t g0 = w0.cols(), g1 = w1.cols();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> best(g1, -1e300);
    for (std::size_t m = 0; m < k; ++m) {
      std::vector<double> edge(2 * c);
      for (std::size_t d = 0; d < c; ++d) {
        edge[d] = f.at(i, d);
        edge[c + d] = f.at(i, d) - f.at(nbr[i * k + m], d);
      }
      std::vector<double> h0(g0, 0.0);
      for (std::size_t o = 0; o < g0; ++o) {
        double acc = b0.data[o];
        for (std::size_t d = 0; d < 2 * c; ++d) acc += edge[d] * w0.at(d, o);
        h0[o] = std::max(0.0, acc);
      }
      for (std::size_t o = 0; o < g1; ++o) {
        double acc = b1.data[o];
        for (std::size_t d = 0; d < g0; ++d) acc += h0[d] * w1.at(d, o);
        best[o] = std::max(best[o], std::max(0.0, acc));
      }
    }
    for (std::size_t o = 0; o < g1; ++o)
      CHECK(out->value.at(i, o) == doctest::Approx(best[o]).epsilon(1e-12));
  }
}

TEST_CASE("aggregation variants: PM equals a branch on ties, PC width, SF composition") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(23);
  Network net(cfg, ps);
  const CloudInput in = prepared_scene(net);
  const Var coords = ad::constant(in.coords);
  const Var feats = ad::constant(in.local_features);
  const auto [features, relations] = net.feature_network(coords, feats);

  SUBCASE("PM with identical branch parameters on the same graph") {
    // Same features, same neighbor structure, shared parameters: copy the
    // feature branch parameters into the Cartesian branch and use the same
    // neighbor list; both branches then emit identical tensors.
    NetworkConfig pm = cfg;
    pm.aggregation = AggregationVariant::kParallelMax;
    ad::ParamStore ps2(29);
    Network net2(pm, ps2);
    for (int i = 0; i < 2; ++i) {
      const std::string f_p = "agg.f0.mlp" + std::to_string(i);
      const std::string c_p = "agg.c0.mlp" + std::to_string(i);
      ps2.get(c_p + ".w")->value = ps2.get(f_p + ".w")->value;
      ps2.get(c_p + ".b")->value = ps2.get(f_p + ".b")->value;
    }
    Rng rng(4);
    Tensor f({12, 8});
    for (auto& v : f.data) v = rng.uniform(-1, 1);
    const auto nbr = feature_space_knn(f, 3);
    const Var a = net2.graph_block(ad::constant(f), nbr, 3, "agg.f0");
    const Var b = net2.graph_block(ad::constant(f), nbr, 3, "agg.c0");
    CHECK(a->value.data == b->value.data);
    const Var merged = ad::max_elementwise(a, b);
    CHECK(merged->value.data == a->value.data);
  }

  SUBCASE("PC output width matches the merge mlp") {
    NetworkConfig pc = cfg;
    pc.aggregation = AggregationVariant::kParallelConcat;
    ad::ParamStore ps3(31);
    Network net3(pc, ps3);
    const CloudInput in3 = prepared_scene(net3);
    const auto [f3, r3] = net3.feature_network(ad::constant(in3.coords),
                                               ad::constant(in3.local_features));
    const Var out = net3.aggregate(f3, r3, in3.cartesian_knn);
    CHECK(out->value.shape ==
          std::vector<std::size_t>{net3.config().n_points, net3.config().graph_mlp.back()});
  }

  SUBCASE("SF equals manual composition of the two blocks") {
    const Var sf = net.aggregate(features, relations, in.cartesian_knn);
    const auto nbr = feature_space_knn(relations->value, cfg.kf);
    const Var h1 = net.graph_block(features, nbr, cfg.kf, "agg.f0");
    const Var h2 = net.graph_block(h1, in.cartesian_knn, cfg.kc, "agg.c0");
    CHECK(sf->value.data == h2->value.data);
  }
}

TEST_CASE("netvlad single-cluster analytic case") {
  // K=1, centers 0, identity projection: V = sum of points, then two L2
  // normalizations that collapse into one.
  NetworkConfig cfg = tiny_config();
  cfg.fc_stack = {2};  // feature dim 2 for the toy case
  cfg.vlad_clusters = 1;
  cfg.output_dim = 2;
  ad::ParamStore ps(37);
  Network net(cfg, ps);
  ps.get("vlad.centers")->value = Tensor({1, 2});
  Tensor identity({2, 2});
  identity.data = {1, 0, 0, 1};
  ps.get("vlad.proj.w")->value = identity;
  ps.get("vlad.proj.b")->value = Tensor({1, 2});

  Tensor pts({2, 2});
  pts.data = {1, 0, 0, 1};
  const Var d = net.netvlad(ad::constant(pts));
  CHECK(d->value.data[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(d->value.data[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("netvlad matches a long-double oracle on a hand-set K=2 case") {
  NetworkConfig cfg = tiny_config();
  cfg.fc_stack = {2};
  cfg.vlad_clusters = 2;
  cfg.output_dim = 4;
  ad::ParamStore ps(41);
  Network net(cfg, ps);

  const std::vector<double> w = {0.4, -0.2, 0.1, 0.3};   // 2x2 assignment weights
  const std::vector<double> b = {0.05, -0.1};
  const std::vector<double> centers = {0.2, -0.3, -0.1, 0.4};  // 2x2
  Tensor wt({2, 2}), bt({1, 2}), ct({2, 2});
  wt.data = w;
  bt.data = b;
  ct.data = centers;
  ps.get("vlad.assign.w")->value = wt;
  ps.get("vlad.assign.b")->value = bt;
  ps.get("vlad.centers")->value = ct;
  Tensor proj({4, 4});
  for (int i = 0; i < 4; ++i) proj.at(i, i) = 1.0;
  ps.get("vlad.proj.w")->value = proj;
  ps.get("vlad.proj.b")->value = Tensor({1, 4});

  const std::vector<double> x = {0.6, 0.8, -0.8, 0.6, 1.0, 0.0};  // 3 unit rows
  Tensor xt({3, 2});
  xt.data = x;
  const Var got = net.netvlad(ad::constant(xt));

  // Direct formula evaluation in long double.
  long double vlad[2][2] = {{0, 0}, {0, 0}};
  for (int i = 0; i < 3; ++i) {
    const long double s0 = (long double)x[2 * i] * w[0] + (long double)x[2 * i + 1] * w[2] + b[0];
    const long double s1 = (long double)x[2 * i] * w[1] + (long double)x[2 * i + 1] * w[3] + b[1];
    const long double m = std::max(s0, s1);
    const long double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const long double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    vlad[0][0] += a0 * (x[2 * i] - centers[0]);
    vlad[0][1] += a0 * (x[2 * i + 1] - centers[1]);
    vlad[1][0] += a1 * (x[2 * i] - centers[2]);
    vlad[1][1] += a1 * (x[2 * i + 1] - centers[3]);
  }
  long double flat[4];
  for (int kk = 0; kk < 2; ++kk) {
    const long double norm = std::sqrt(vlad[kk][0] * vlad[kk][0] + vlad[kk][1] * vlad[kk][1]);
    flat[2 * kk] = vlad[kk][0] / norm;
    flat[2 * kk + 1] = vlad[kk][1] / norm;
  }
  long double total = 0;
  for (int i = 0; i < 4; ++i) total += flat[i] * flat[i];
  total = std::sqrt(total);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(got->value.data[i] - (double)(flat[i] / total)) < 1e-10);
  }
}

TEST_CASE("netvlad output is unit norm for random inputs") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(43);
  Network net(cfg, ps);
  Rng rng(6);
  Tensor x({cfg.n_points, cfg.fc_stack.back()});
  for (auto& v : x.data) v = rng.uniform(-1, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Var d = net.netvlad(ad::l2_normalize_rows(ad::constant(x)));
    double norm = 0;
    for (double v : d->value.data) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);
    for (auto& v : x.data) v = rng.uniform(-2, 2);
  }
}

TEST_CASE("descriptor is invariant under input permutation") {
  NetworkConfig cfg = tiny_config();
  cfg.n_points = 64;
  cfg.neighborhood = {4, 12, 4};
  ad::ParamStore ps(47);
  Network net(cfg, ps);
  PointCloud cloud = generate_synthetic_place(21, 2, 64, 0.0, 0.0);
  const GlobalDescriptor base = net.descriptor(net.prepare(cloud));

  Rng rng(55);
  for (int trial = 0; trial < 5; ++trial) {
    PointCloud shuffled = cloud;
    for (std::size_t i = shuffled.points.size(); i > 1; --i)
      std::swap(shuffled.points[i - 1], shuffled.points[static_cast<std::size_t>(rng.below(i))]);
    const GlobalDescriptor permuted = net.descriptor(net.prepare(shuffled));
    CHECK(max_abs_diff(base.values, permuted.values) < 1e-6);
  }
}

TEST_CASE("different places give different descriptors") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(53);
  Network net(cfg, ps);
  const GlobalDescriptor a = net.descriptor(prepared_scene(net, 100, 0));
  const GlobalDescriptor b = net.descriptor(prepared_scene(net, 200, 0));
  CHECK(max_abs_diff(a.values, b.values) > 1e-6);
}

TEST_CASE("descriptor computation is bitwise reproducible across stores") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps1(61), ps2(61);
  Network net1(cfg, ps1), net2(cfg, ps2);
  const PointCloud cloud = downsample_random(generate_synthetic_place(5, 5, 64, 0.0, 0.0), 32, 3);
  const GlobalDescriptor a = net1.descriptor(net1.prepare(cloud));
  const GlobalDescriptor b = net2.descriptor(net2.prepare(cloud));
  CHECK(a.values == b.values);
}

TEST_CASE("feature-space graph links well-separated patches of the same geometry") {
  // Two parallel planar patches far apart in z: nearly identical local
  // geometry, large Cartesian separation. The feature-space kNN of the
  // feature network's relation tensor must produce at least one edge
  // between them.
  PointCloud cloud;
  Rng rng(71);
  auto add_patch = [&](double zc) {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 8; ++j)
        cloud.points.push_back({-0.7 + 0.2 * i + rng.uniform(-0.01, 0.01),
                                -0.7 + 0.2 * j + rng.uniform(-0.01, 0.01),
                                zc + rng.uniform(-0.005, 0.005)});
  };
  add_patch(-0.8);
  add_patch(+0.8);
  cloud.normalized = true;
  const std::size_t patch_size = 32;

  NetworkConfig cfg = tiny_config();
  cfg.n_points = 64;
  cfg.neighborhood = {4, 12, 4};
  cfg.kf = 4;
  ad::ParamStore ps(73);
  Network net(cfg, ps);
  const CloudInput in = net.prepare(cloud);
  const auto [features, relations] =
      net.feature_network(ad::constant(in.coords), ad::constant(in.local_features));
  const auto nbr = feature_space_knn(relations->value, cfg.kf);

  // Recover patch membership of the canonically ordered points by z sign.
  std::vector<int> patch_of(64);
  for (std::size_t i = 0; i < 64; ++i) patch_of[i] = in.coords.at(i, 2) < 0.0 ? 0 : 1;
  (void)patch_size;
  std::size_t cross_edges = 0;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t m = 0; m < cfg.kf; ++m)
      if (patch_of[i] != patch_of[nbr[i * cfg.kf + m]]) ++cross_edges;
  CHECK(cross_edges > 0);

  // Cartesian edges stay within a patch at this separation.
  std::size_t cartesian_cross = 0;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t m = 0; m < cfg.kc; ++m)
      if (patch_of[i] != patch_of[in.cartesian_knn[i * cfg.kc + m]]) ++cartesian_cross;
  CHECK(cartesian_cross == 0);
}

TEST_CASE("forward errors carry the stage name") {
  NetworkConfig cfg = tiny_config();
  ad::ParamStore ps(79);
  Network net(cfg, ps);
  Tensor bad({4, 8});
  std::vector<std::size_t> nbr(4 * 5, 0);
  CHECK_THROWS_WITH_AS(net.graph_block(ad::constant(bad), nbr, 5, "agg.f0"),
                       doctest::Contains("graph_block"), DataError);
}

TEST_CASE("network config round-trips through the key=value file") {
  namespace fs = std::filesystem;
  NetworkConfig cfg = NetworkConfig::desk_scale(0.25, 256);
  cfg.relation = RelationVariant::kSeries;
  cfg.aggregation = AggregationVariant::kParallelConcat;
  cfg.kf = 12;
  cfg.use_local_features = false;
  cfg.neighborhood = {5, 45, 5};
  const std::string path = (fs::temp_directory_path() / "lpd_netcfg.txt").string();
  save_network_config(path, cfg);
  const NetworkConfig back = load_network_config(path);
  CHECK(back.n_points == cfg.n_points);
  CHECK(back.fn_mlp == cfg.fn_mlp);
  CHECK(back.tnet_mlp == cfg.tnet_mlp);
  CHECK(back.fc_stack == cfg.fc_stack);
  CHECK(back.kf == 12);
  CHECK(back.relation == RelationVariant::kSeries);
  CHECK(back.aggregation == AggregationVariant::kParallelConcat);
  CHECK(back.use_local_features == false);
  CHECK(back.neighborhood.k_min == 5);
  fs::remove(path);
}

TEST_CASE("gradients flow through the composed network below 1e-4") {
  // The acceptance suite repeats this at full scope; this is the fast
  // guard for refactors.
  std::size_t params = 0;
  const auto entry = gradcheck_full_network(gradcheck_config(), 1234, &params);
  INFO(entry.name);
  CHECK(entry.rel_err < 1e-4);
  CHECK(params > 0);
}
