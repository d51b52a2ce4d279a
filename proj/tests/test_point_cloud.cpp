#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "lpdnet/point_cloud.hpp"

using namespace lpdnet;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("load_cloud round-trips a single record") {
  const std::string path = temp_path("lpd_single.bin");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const double xyz[3] = {1.0, 2.0, 3.0};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
  }
  const PointCloud cloud = load_cloud(path);
  REQUIRE(cloud.size() == 1);
  CHECK(cloud.points[0].x == 1.0);
  CHECK(cloud.points[0].y == 2.0);
  CHECK(cloud.points[0].z == 3.0);
  CHECK_FALSE(cloud.normalized);
  std::filesystem::remove(path);
}

TEST_CASE("load_cloud rejects empty and truncated files") {
  const std::string empty = temp_path("lpd_empty.bin");
  { std::ofstream out(empty, std::ios::binary | std::ios::trunc); }
  CHECK_THROWS_WITH_AS(load_cloud(empty), doctest::Contains("empty cloud"), DataError);

  const std::string truncated = temp_path("lpd_trunc.bin");
  {
    std::ofstream out(truncated, std::ios::binary | std::ios::trunc);
    const char bytes[10] = {};
    out.write(bytes, sizeof(bytes));
  }
  CHECK_THROWS_AS(load_cloud(truncated), DataError);
  CHECK_THROWS_AS(load_cloud(temp_path("lpd_missing_file.bin")), DataError);
  std::filesystem::remove(empty);
  std::filesystem::remove(truncated);
}

TEST_CASE("load_cloud honors the expected point count") {
  const std::string path = temp_path("lpd_4096.bin");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    for (int i = 0; i < 4096; ++i) {
      const double xyz[3] = {static_cast<double>(i), 0.0, 0.0};
      out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
  }
  const PointCloud cloud = load_cloud(path, 4096);
  CHECK(cloud.size() == 4096);
  CHECK_THROWS_AS(load_cloud(path, 100), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("load_cloud rejects non-finite coordinates") {
  const std::string path = temp_path("lpd_nan.bin");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const double xyz[3] = {1.0, std::nan(""), 3.0};
    out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
  }
  CHECK_THROWS_AS(load_cloud(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("normalize_cloud centers and scales") {
  PointCloud cloud;
  cloud.points = {{0, 0, 0}, {10, 0, 0}};
  const PointCloud norm = normalize_cloud(cloud);
  REQUIRE(norm.normalized);
  CHECK(norm.points[0].x == doctest::Approx(-1.0));
  CHECK(norm.points[1].x == doctest::Approx(1.0));
  CHECK(norm.points[0].y == 0.0);

  PointCloud single;
  single.points = {{7, -3, 2}};
  const PointCloud collapsed = normalize_cloud(single);
  CHECK(collapsed.points[0].x == 0.0);
  CHECK(collapsed.points[0].y == 0.0);
  CHECK(collapsed.points[0].z == 0.0);
}

TEST_CASE("normalize_cloud output has zero centroid and unit max") {
  Rng rng(123);
  PointCloud cloud;
  for (int i = 0; i < 100; ++i)
    cloud.points.push_back({rng.uniform(-50, 80), rng.uniform(0, 30), rng.uniform(-5, 5)});
  const PointCloud norm = normalize_cloud(cloud);

  double cx = 0, cy = 0, cz = 0, max_abs = 0;
  for (const auto& p : norm.points) {
    cx += p.x;
    cy += p.y;
    cz += p.z;
    max_abs = std::max({max_abs, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
    CHECK(std::abs(p.x) <= 1.0);
    CHECK(std::abs(p.y) <= 1.0);
    CHECK(std::abs(p.z) <= 1.0);
  }
  CHECK(std::abs(cx / 100) < 1e-12);
  CHECK(std::abs(cy / 100) < 1e-12);
  CHECK(std::abs(cz / 100) < 1e-12);
  CHECK(max_abs == doctest::Approx(1.0));
}

TEST_CASE("normalize_cloud is idempotent and translation invariant") {
  Rng rng(321);
  PointCloud cloud;
  for (int i = 0; i < 64; ++i)
    cloud.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)});

  const PointCloud once = normalize_cloud(cloud);
  const PointCloud twice = normalize_cloud(once);
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(std::abs(once.points[i].x - twice.points[i].x) < 1e-12);
    CHECK(std::abs(once.points[i].y - twice.points[i].y) < 1e-12);
    CHECK(std::abs(once.points[i].z - twice.points[i].z) < 1e-12);
  }

  PointCloud shifted = cloud;
  for (auto& p : shifted.points) {
    p.x += 1000.0;
    p.y -= 250.0;
    p.z += 3.25;
  }
  const PointCloud shifted_norm = normalize_cloud(shifted);
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(once.points[i].x == doctest::Approx(shifted_norm.points[i].x).epsilon(1e-12));
    CHECK(once.points[i].y == doctest::Approx(shifted_norm.points[i].y).epsilon(1e-12));
    CHECK(once.points[i].z == doctest::Approx(shifted_norm.points[i].z).epsilon(1e-12));
  }
}

TEST_CASE("downsample_random identity, membership, determinism") {
  Rng rng(9);
  PointCloud cloud;
  for (int i = 0; i < 5000; ++i)
    cloud.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});

  PointCloud same = cloud;
  same.points.resize(4096);
  const PointCloud identity = downsample_random(same, 4096, 7);
  REQUIRE(identity.size() == 4096);
  CHECK(identity.points[0].x == same.points[0].x);
  CHECK(identity.points[4095].z == same.points[4095].z);

  const PointCloud sampled = downsample_random(cloud, 4096, 1);
  REQUIRE(sampled.size() == 4096);
  std::set<std::array<double, 3>> input_set;
  for (const auto& p : cloud.points) input_set.insert({p.x, p.y, p.z});
  std::set<std::array<double, 3>> output_set;
  for (const auto& p : sampled.points) {
    CHECK(input_set.count({p.x, p.y, p.z}) == 1);
    output_set.insert({p.x, p.y, p.z});
  }
  CHECK(output_set.size() == 4096);  // no duplicates

  const PointCloud again = downsample_random(cloud, 4096, 1);
  CHECK(std::equal(sampled.points.begin(), sampled.points.end(), again.points.begin(),
                   [](const Point3& a, const Point3& b) {
                     return a.x == b.x && a.y == b.y && a.z == b.z;
                   }));

  const PointCloud other_seed = downsample_random(cloud, 4096, 2);
  bool any_diff = false;
  for (std::size_t i = 0; i < 4096 && !any_diff; ++i)
    any_diff = sampled.points[i].x != other_seed.points[i].x;
  CHECK(any_diff);

  PointCloud small;
  small.points.assign(100, {0, 0, 0});
  CHECK_THROWS_AS(downsample_random(small, 4096, 1), DataError);
}

TEST_CASE("generate_synthetic_place determinism and seed separation") {
  const PointCloud a = generate_synthetic_place(5, 11, 256, 0.0, 0.0);
  const PointCloud b = generate_synthetic_place(5, 11, 256, 0.0, 0.0);
  REQUIRE(a.size() == 256);
  CHECK(a.normalized);
  CHECK(std::equal(a.points.begin(), a.points.end(), b.points.begin(),
                   [](const Point3& x, const Point3& y) {
                     return x.x == y.x && x.y == y.y && x.z == y.z;
                   }));

  const PointCloud c = generate_synthetic_place(6, 11, 256, 0.0, 0.0);
  bool differs = false;
  for (std::size_t i = 0; i < 256 && !differs; ++i)
    differs = a.points[i].x != c.points[i].x;
  CHECK(differs);

  CHECK_THROWS_AS(generate_synthetic_place(1, 1, 32, 0.0, 0.0), DataError);
  CHECK_THROWS_AS(generate_synthetic_place(1, 1, 256, 0.0, 1.5), DataError);
}

TEST_CASE("generate_synthetic_place replaces exactly floor(noise_frac*n) points") {
  const std::size_t n = 250;
  const PointCloud clean = generate_synthetic_place(3, 17, n, 0.0, 0.0);
  const PointCloud noisy = generate_synthetic_place(3, 17, n, 0.0, 0.1);
  std::size_t replaced = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (clean.points[i].x != noisy.points[i].x || clean.points[i].y != noisy.points[i].y ||
        clean.points[i].z != noisy.points[i].z)
      ++replaced;
  }
  CHECK(replaced == 25);  // floor(0.1 * 250)
}

TEST_CASE("manifest parsing") {
  const std::string path = temp_path("lpd_manifest.csv");
  {
    std::ofstream out(path);
    out << "id,northing,easting,cloud_path\n";
    out << "a,100.5,-3.25,clouds/a.bin\n";
    out << "b,200,7,clouds/b.bin\n";
  }
  const DatasetManifest m = load_manifest(path);
  REQUIRE(m.records.size() == 2);
  CHECK(m.records[0].id == "a");
  CHECK(m.records[0].northing == 100.5);
  CHECK(m.records[1].cloud_path == "clouds/b.bin");
  CHECK(m.positive_radius == 25.0);

  {
    std::ofstream out(path);
    out << "id,northing,easting,cloud_path\n";
  }
  CHECK(load_manifest(path).records.empty());

  {
    std::ofstream out(path);
    out << "id,northing,easting,cloud_path\n";
    out << "dup,1,2,x.bin\n";
    out << "dup,3,4,y.bin\n";
  }
  CHECK_THROWS_WITH_AS(load_manifest(path), doctest::Contains("dup"), DataError);

  {
    std::ofstream out(path);
    out << "id,northing,easting,cloud_path\n";
    out << "a,not_a_number,2,x.bin\n";
  }
  CHECK_THROWS_AS(load_manifest(path), DataError);

  {
    std::ofstream out(path);
    out << "wrong,header\n";
  }
  CHECK_THROWS_AS(load_manifest(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("manifest round-trip") {
  const std::string path = temp_path("lpd_manifest_rt.csv");
  DatasetManifest m;
  m.records.push_back({"p0_o0", 0.0, 0.0, "c/p0_o0.bin"});
  m.records.push_back({"p1_o0", 100.0, 0.0, "c/p1_o0.bin"});
  save_manifest(path, m);
  const DatasetManifest back = load_manifest(path);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[1].northing == 100.0);
  CHECK(back.records[1].id == "p1_o0");
  std::filesystem::remove(path);
}
