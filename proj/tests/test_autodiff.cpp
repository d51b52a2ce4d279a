#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lpdnet/autodiff.hpp"
#include "lpdnet/gradcheck.hpp"

using namespace lpdnet;
using ad::Var;

namespace {

Tensor t2(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor::from_rows(r, c, std::move(v));
}

}  // namespace

TEST_CASE("shared_mlp forward examples") {
  // Identity weights, zero bias: y = x.
  ad::ParamStore ps(1);
  Var x = ad::constant(t2(2, 2, {1, 2, 3, 4}));
  Tensor identity({2, 2});
  identity.data = {1, 0, 0, 1};
  Var w = ad::constant(identity);
  Var b = ad::constant(Tensor({1, 2}));
  Var y = ad::shared_mlp(x, w, b);
  CHECK(y->value.data == std::vector<double>{1, 2, 3, 4});

  // 4*1 + 5*2 + 3 = 17.
  Var x2 = ad::constant(t2(1, 2, {4, 5}));
  Var w2 = ad::constant(t2(2, 1, {1, 2}));
  Var b2 = ad::constant(t2(1, 1, {3}));
  CHECK(ad::shared_mlp(x2, w2, b2)->value.scalar() == 17.0);
}

TEST_CASE("shared_mlp applies the same weights to every row") {
  ad::ParamStore ps(3);
  Var w = ps.create("w", {3, 4});
  Var b = ps.create("b", {1, 4});
  Tensor rows({2, 3});
  rows.data = {0.5, -1.0, 2.0, 0.5, -1.0, 2.0};  // identical rows
  Var y = ad::shared_mlp(ad::constant(rows), w, b);
  for (int c = 0; c < 4; ++c) CHECK(y->value.at(0, c) == y->value.at(1, c));
}

TEST_CASE("maxpool_points basics and tie rule") {
  Var single = ad::constant(t2(1, 3, {5, -1, 2}));
  Var pooled = ad::maxpool_points(single);
  CHECK(pooled->value.data == std::vector<double>{5, -1, 2});

  // Duplicate column maxima: gradient goes to the lowest row only.
  ad::ParamStore ps(4);
  Var x = ps.create_with("x", t2(3, 2, {1, 7, 5, 7, 5, 3}));
  Var loss = ad::sum_all(ad::maxpool_points(x));
  ad::backward(loss);
  const Tensor& g = ps.get("x")->grad;
  CHECK(g.data == std::vector<double>{0, 1, 1, 0, 0, 0});
}

TEST_CASE("maxpool output is invariant under row permutation") {
  Rng rng(12);
  Tensor x({6, 5});
  for (auto& v : x.data) v = rng.uniform(-2, 2);
  Tensor shuffled({6, 5});
  const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 5; ++c) shuffled.at(r, c) = x.at(perm[r], c);
  CHECK(ad::maxpool_points(ad::constant(x))->value.data ==
        ad::maxpool_points(ad::constant(shuffled))->value.data);
}

TEST_CASE("softmax rows") {
  Var x = ad::constant(t2(2, 4, {3, 3, 3, 3, 1000, 1000, 1000, 1000}));
  Var s = ad::softmax_rows(x);
  for (std::size_t i = 0; i < 8; ++i) CHECK(s->value.data[i] == doctest::Approx(0.25));

  Rng rng(5);
  Tensor r({8, 6});
  for (auto& v : r.data) v = rng.uniform(-30, 30);
  Var sr = ad::softmax_rows(ad::constant(r));
  for (std::size_t row = 0; row < 8; ++row) {
    double sum = 0;
    for (std::size_t c = 0; c < 6; ++c) sum += sr->value.at(row, c);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("l2 normalize rows and the zero-vector warning") {
  Var v = ad::constant(t2(1, 2, {3, 4}));
  Var n = ad::l2_normalize_rows(v);
  CHECK(n->value.data[0] == doctest::Approx(0.6));
  CHECK(n->value.data[1] == doctest::Approx(0.8));

  ad::reset_zero_norm_warnings();
  Var z = ad::l2_normalize_rows(ad::constant(Tensor({1, 4})));
  CHECK(z->value.data == std::vector<double>{0, 0, 0, 0});
  CHECK(ad::zero_norm_warning_count() == 1);
  ad::reset_zero_norm_warnings();
}

TEST_CASE("every op is pure and repeatable") {
  Rng rng(31);
  Tensor x({5, 4});
  for (auto& v : x.data) v = rng.uniform(-1, 1);
  Var vx = ad::constant(x);
  const auto a = ad::softmax_rows(ad::relu(vx))->value.data;
  const auto b = ad::softmax_rows(ad::relu(vx))->value.data;
  CHECK(a == b);
}

TEST_CASE("non-finite outputs are rejected") {
  Var big = ad::constant(t2(1, 2, {1e308, 1e308}));
  CHECK_THROWS_AS(ad::add(big, big), NumericError);
}

TEST_CASE("gradient accumulation across reuse") {
  // f = sum(x*x) with x feeding two paths: grads add.
  ad::ParamStore ps(6);
  Var x = ps.create_with("x", t2(1, 2, {2, 3}));
  Var loss = ad::sum_all(ad::add(ad::mul(x, x), ad::mul(x, x)));
  ad::backward(loss);
  const Tensor& g = ps.get("x")->grad;
  CHECK(g.data[0] == doctest::Approx(8.0));   // 2*2x
  CHECK(g.data[1] == doctest::Approx(12.0));
}

TEST_CASE("backward with a gradient sink leaves leaf grads untouched") {
  ad::ParamStore ps(7);
  Var x = ps.create_with("x", t2(1, 3, {1, 2, 3}));
  Var loss = ad::sum_all(ad::mul(x, x));
  ad::GradSink sink;
  ad::backward(loss, &sink);
  CHECK(ps.get("x")->grad.data == std::vector<double>{0, 0, 0});
  REQUIRE(sink.count(x.get()) == 1);
  CHECK(sink[x.get()].data == std::vector<double>{2, 4, 6});
}

TEST_CASE("all primitives pass finite-difference checks below 1e-6") {
  for (const auto& entry : gradcheck_primitives(2024)) {
    INFO(entry.name);
    CHECK(entry.rel_err < 1e-6);
  }
}

TEST_CASE("linear layer gradient is exact to roundoff") {
  const auto entries = gradcheck_primitives(99);
  REQUIRE(!entries.empty());
  CHECK(entries.front().name.find("shared_mlp linear") != std::string::npos);
  CHECK(entries.front().rel_err < 1e-9);
}

TEST_CASE("finite-difference checker catches a corrupted gradient") {
  ad::ParamStore ps(8);
  Rng rng(9);
  Tensor init({3, 3});
  for (auto& v : init.data) v = rng.uniform(0.5, 1.5);
  Var x = ps.create_with("x", init);

  // An op with a deliberately wrong backward: scale gradient by 2.
  auto broken = [&]() {
    Var y = ad::mul(x, x);
    Var bad = std::make_shared<ad::Node>();
    bad->value = y->value;
    bad->requires_grad = true;
    bad->id = ad::constant(Tensor({1, 1}))->id;  // fresh id after y, before sum_all
    bad->parents = {y};
    Var ys = y;
    bad->backward_fn = [ys](ad::Node& self) {
      Tensor& g = ys->ensure_grad();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += 2.0 * self.grad.data[i];
    };
    return ad::sum_all(bad);
  };
  const auto report = ad::finite_difference_check(broken, ps, 1e-6);
  CHECK(report.max_rel_err > 1e-2);
}

TEST_CASE("checkpoint round-trip preserves bytes and values") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "lpd_ckpt_test.bin").string();
  ad::ParamStore a(11);
  a.create("zeta.w", {3, 4});
  a.create("alpha.b", {1, 4});
  a.create("mid.m", {2, 2});
  a.save(path);

  ad::ParamStore b(999);  // different seed: values must come from the file
  b.create("alpha.b", {1, 4});
  b.create("mid.m", {2, 2});
  b.create("zeta.w", {3, 4});
  b.load(path);
  for (const auto& [name, p] : a.all()) CHECK(p->value.data == b.get(name)->value.data);

  // Same content saved again is byte-identical (sorted name order).
  const std::string path2 = (fs::temp_directory_path() / "lpd_ckpt_test2.bin").string();
  b.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
  const std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(bytes1 == bytes2);

  // Shape mismatch is a data error.
  ad::ParamStore c(5);
  c.create("zeta.w", {4, 3});
  CHECK_THROWS_AS(c.load(path), DataError);

  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("checkpoint rejects bad magic") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "lpd_ckpt_bad.bin").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACHECKPOINT--";
  }
  ad::ParamStore ps(1);
  CHECK_THROWS_AS(ps.load(path), DataError);
  fs::remove(path);
}

TEST_CASE("param store init is deterministic per seed") {
  ad::ParamStore a(77), b(77), c(78);
  a.create("w", {4, 4});
  b.create("w", {4, 4});
  c.create("w", {4, 4});
  CHECK(a.get("w")->value.data == b.get("w")->value.data);
  CHECK(a.get("w")->value.data != c.get("w")->value.data);

  // Glorot bound.
  const double limit = std::sqrt(6.0 / 8.0);
  for (double v : a.get("w")->value.data) CHECK(std::abs(v) <= limit);
}
