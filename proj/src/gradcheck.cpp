#include "lpdnet/gradcheck.hpp"

#include <cmath>

#include "lpdnet/training.hpp"

namespace lpdnet {

namespace {

using ad::Var;

// Seeded values bounded away from relu/max kinks so central differences
// stay on one side of every nondifferentiable point.
Tensor offset_random(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (double& v : t.data) {
    const double mag = 0.5 + rng.uniform01();        // in [0.5, 1.5)
    v = rng.uniform01() < 0.5 ? -mag : mag;
  }
  return t;
}

GradcheckEntry check_one(const std::string& name, ad::ParamStore& store,
                         const std::function<Var()>& loss, double eps = 1e-5) {
  // The small output scale keeps central-difference roundoff noise well
  // under the pass thresholds for gradient elements that are exactly zero.
  auto scaled = [&loss] { return ad::scale(loss(), 0.02); };
  const auto report = ad::finite_difference_check(scaled, store, eps);
  return {name + " (worst: " + report.worst_param + ")", report.max_rel_err};
}

}  // namespace

NetworkConfig gradcheck_config() {
  NetworkConfig cfg;
  cfg.n_points = 32;
  cfg.fn_mlp = {8, 8};
  cfg.tnet_mlp = {8, 16, 32};
  cfg.tnet_fc = {16, 8};
  cfg.graph_mlp = {8, 8};
  cfg.fc_stack = {8, 16, 32};
  cfg.kf = 4;
  cfg.kc = 4;
  cfg.vlad_clusters = 4;
  cfg.output_dim = 16;
  cfg.neighborhood = {4, 8, 2};
  return cfg;
}

std::vector<GradcheckEntry> gradcheck_primitives(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6c));
  std::vector<GradcheckEntry> entries;

  auto squared_sum = [](const Var& v) { return ad::sum_all(ad::mul(v, v)); };

  {
    // Linear layer; no truncation term, so a wide step drowns the roundoff.
    ad::ParamStore ps(seed);
    Var x = ps.create_with("x", offset_random(rng, 3, 4));
    Var w = ps.create_with("w", offset_random(rng, 4, 5));
    Var b = ps.create_with("b", offset_random(rng, 1, 5));
    entries.push_back(check_one(
        "shared_mlp linear", ps, [&] { return ad::sum_all(ad::shared_mlp(x, w, b)); }, 1e-3));
  }
  {
    ad::ParamStore ps(seed + 1);
    Var x = ps.create_with("x", offset_random(rng, 3, 4));
    Var w = ps.create_with("w", offset_random(rng, 4, 5));
    Var b = ps.create_with("b", offset_random(rng, 1, 5));
    entries.push_back(check_one("shared_mlp", ps,
                                [&] { return squared_sum(ad::shared_mlp(x, w, b)); }));
  }
  {
    ad::ParamStore ps(seed + 2);
    Var x = ps.create_with("x", offset_random(rng, 4, 6));
    entries.push_back(check_one("relu", ps, [&] { return squared_sum(ad::relu(x)); }));
  }
  {
    ad::ParamStore ps(seed + 3);
    Var x = ps.create_with("x", offset_random(rng, 4, 5));
    entries.push_back(
        check_one("softmax_rows", ps, [&] { return squared_sum(ad::softmax_rows(x)); }));
  }
  {
    ad::ParamStore ps(seed + 4);
    Var x = ps.create_with("x", offset_random(rng, 4, 5));
    Var w = ps.create_with("w", offset_random(rng, 5, 3));
    entries.push_back(check_one("l2_normalize_rows", ps, [&] {
      return squared_sum(ad::matmul(ad::l2_normalize_rows(x), w));
    }));
  }
  {
    ad::ParamStore ps(seed + 5);
    Var x = ps.create_with("x", offset_random(rng, 6, 4));
    entries.push_back(
        check_one("maxpool_points", ps, [&] { return squared_sum(ad::maxpool_points(x)); }));
  }
  {
    ad::ParamStore ps(seed + 6);
    Var x = ps.create_with("x", offset_random(rng, 8, 4));
    entries.push_back(check_one("max_over_groups", ps,
                                [&] { return squared_sum(ad::max_over_groups(x, 2, 4)); }));
  }
  {
    ad::ParamStore ps(seed + 7);
    Var a = ps.create_with("a", offset_random(rng, 4, 4));
    Var b = ps.create_with("b", offset_random(rng, 4, 4));
    entries.push_back(check_one("max_elementwise", ps,
                                [&] { return squared_sum(ad::max_elementwise(a, b)); }));
  }
  {
    ad::ParamStore ps(seed + 8);
    Var x = ps.create_with("x", offset_random(rng, 5, 3));
    const std::vector<std::size_t> idx = {4, 0, 2, 2, 1};
    entries.push_back(
        check_one("gather_rows", ps, [&] { return squared_sum(ad::gather_rows(x, idx)); }));
  }
  {
    ad::ParamStore ps(seed + 17);
    Var x = ps.create_with("x", offset_random(rng, 5, 3));
    const std::vector<std::size_t> nbr = {1, 4, 2, 0, 3, 1, 0, 2, 4, 0};  // 5 points, k=2
    entries.push_back(
        check_one("edge_features", ps, [&] { return squared_sum(ad::edge_features(x, nbr, 2)); }));
  }
  {
    ad::ParamStore ps(seed + 9);
    Var x = ps.create_with("x", offset_random(rng, 3, 4));
    entries.push_back(
        check_one("repeat_rows", ps, [&] { return squared_sum(ad::repeat_rows(x, 3)); }));
  }
  {
    ad::ParamStore ps(seed + 10);
    Var a = ps.create_with("a", offset_random(rng, 3, 4));
    Var b = ps.create_with("b", offset_random(rng, 3, 2));
    entries.push_back(
        check_one("concat_cols", ps, [&] { return squared_sum(ad::concat_cols(a, b)); }));
  }
  {
    ad::ParamStore ps(seed + 11);
    Var a = ps.create_with("a", offset_random(rng, 3, 4));
    Var b = ps.create_with("b", offset_random(rng, 4, 5));
    entries.push_back(check_one("matmul", ps, [&] { return squared_sum(ad::matmul(a, b)); }));
  }
  {
    ad::ParamStore ps(seed + 12);
    Var a = ps.create_with("a", offset_random(rng, 4, 3));
    Var b = ps.create_with("b", offset_random(rng, 4, 5));
    entries.push_back(
        check_one("matmul_tn", ps, [&] { return squared_sum(ad::matmul_tn(a, b)); }));
  }
  {
    ad::ParamStore ps(seed + 13);
    Var x = ps.create_with("x", offset_random(rng, 4, 3));
    Var s = ps.create_with("s", offset_random(rng, 4, 1));
    entries.push_back(
        check_one("scale_rows", ps, [&] { return squared_sum(ad::scale_rows(x, s)); }));
  }
  {
    ad::ParamStore ps(seed + 14);
    Var x = ps.create_with("x", offset_random(rng, 4, 3));
    entries.push_back(check_one("colsum", ps, [&] { return squared_sum(ad::colsum(x)); }));
  }
  {
    ad::ParamStore ps(seed + 15);
    Var a = ps.create_with("a", offset_random(rng, 3, 3));
    Var b = ps.create_with("b", offset_random(rng, 3, 3));
    entries.push_back(check_one("sub+mul+add", ps, [&] {
      return ad::sum_all(ad::mul(ad::sub(a, b), ad::add(a, b)));
    }));
  }
  {
    ad::ParamStore ps(seed + 16);
    Var x = ps.create_with("x", offset_random(rng, 2, 6));
    entries.push_back(check_one("reshape", ps, [&] {
      return squared_sum(ad::l2_normalize_rows(ad::reshape(x, {3, 4})));
    }));
  }
  return entries;
}

GradcheckEntry gradcheck_full_network(const NetworkConfig& cfg, std::uint64_t seed,
                                      std::size_t* parameter_count) {
  ad::ParamStore ps(seed);
  Network net(cfg, ps);
  if (parameter_count != nullptr) *parameter_count = ps.total_elements();

  // A minimal quadruplet keeps the sweep tractable: the loss composes the
  // same hinges whatever the list lengths.
  SyntheticPlaceDatabase db(4, 2, cfg.n_points, mix_seed(seed, 0xfeed));
  InputCache cache(net, db);
  const std::size_t anchor = 0;                      // p0 o0
  const std::vector<std::size_t> positives = {1};    // p0 o1
  const std::vector<std::size_t> negatives = {2, 4}; // p1 o0, p2 o0
  const std::size_t other = 6;                       // p3 o0
  for (auto item : {anchor, positives[0], negatives[0], negatives[1], other}) cache.get(item);

  LossConfig lcfg;
  lcfg.alpha = 0.9;  // wide margins keep both hinges active at random init
  lcfg.beta = 0.9;
  auto build_loss = [&]() {
    const Var a = net.forward(cache.get(anchor));
    std::vector<Var> pos, neg;
    for (auto item : positives) pos.push_back(net.forward(cache.get(item)));
    for (auto item : negatives) neg.push_back(net.forward(cache.get(item)));
    const Var o = net.forward(cache.get(other));
    return lazy_quadruplet_loss_graph(a, pos, neg, o, lcfg);
  };

  const auto report = ad::finite_difference_check(build_loss, ps, 1e-5);
  return {"full_network (worst: " + report.worst_param + ")", report.max_rel_err};
}

GradcheckResult run_gradcheck(const NetworkConfig& cfg, std::uint64_t seed) {
  GradcheckResult result;
  result.primitives = gradcheck_primitives(seed);
  for (const auto& e : result.primitives) {
    if (e.rel_err > result.worst_primitive) {
      result.worst_primitive = e.rel_err;
      result.worst_primitive_name = e.name;
    }
  }
  const auto full = gradcheck_full_network(cfg, seed, &result.parameter_count);
  result.full_network = full.rel_err;
  result.full_network_worst_param = full.name;
  return result;
}

}  // namespace lpdnet
