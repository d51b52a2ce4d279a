#include "lpdnet/point_cloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace lpdnet {

namespace {

constexpr std::uint64_t kTagScene = 0x5c31;
constexpr std::uint64_t kTagSampling = 0x44b2;
constexpr std::uint64_t kTagJitter = 0x1a7e;
constexpr std::uint64_t kTagNoiseSelect = 0x2b90;
constexpr std::uint64_t kTagNoiseValue = 0x3fd4;

void check_finite(const PointCloud& cloud, const std::string& context) {
  for (const auto& p : cloud.points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw DataError(context + ": non-finite coordinate");
  }
}

}  // namespace

PointCloud load_cloud(const std::string& path, std::optional<std::size_t> expected_n) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open cloud file: " + path);
  const std::streamoff bytes = in.tellg();
  if (bytes == 0) throw DataError("empty cloud: " + path);
  if (bytes % 24 != 0)
    throw DataError("truncated cloud file (size " + std::to_string(bytes) +
                    " not divisible by 24): " + path);
  const std::size_t n = static_cast<std::size_t>(bytes) / 24;
  if (expected_n && n != *expected_n)
    throw DataError("cloud " + path + " has " + std::to_string(n) + " points, expected " +
                    std::to_string(*expected_n));

  PointCloud cloud;
  cloud.points.resize(n);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(cloud.points.data()), bytes);
  if (!in) throw DataError("short read on cloud file: " + path);
  check_finite(cloud, "load_cloud(" + path + ")");
  return cloud;
}

void save_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write cloud file: " + path);
  out.write(reinterpret_cast<const char*>(cloud.points.data()),
            static_cast<std::streamsize>(cloud.points.size() * 24));
  if (!out) throw DataError("write failed: " + path);
}

PointCloud normalize_cloud(const PointCloud& cloud) {
  if (cloud.points.empty()) throw DataError("normalize_cloud: empty cloud");
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (const auto& p : cloud.points) {
    cx += p.x;
    cy += p.y;
    cz += p.z;
  }
  const double inv_n = 1.0 / static_cast<double>(cloud.points.size());
  cx *= inv_n;
  cy *= inv_n;
  cz *= inv_n;

  double max_abs = 0.0;
  for (const auto& p : cloud.points) {
    max_abs = std::max({max_abs, std::abs(p.x - cx), std::abs(p.y - cy), std::abs(p.z - cz)});
  }
  const double scale = max_abs > 0.0 ? 1.0 / max_abs : 1.0;

  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points)
    out.points.push_back({(p.x - cx) * scale, (p.y - cy) * scale, (p.z - cz) * scale});
  out.normalized = true;
  return out;
}

PointCloud downsample_random(const PointCloud& cloud, std::size_t target_n, std::uint64_t seed) {
  const std::size_t n = cloud.points.size();
  if (n < target_n)
    throw DataError("downsample_random: cloud has " + std::to_string(n) + " points, need " +
                    std::to_string(target_n));
  if (n == target_n) return cloud;

  // Partial Fisher-Yates over the index range, then restore input order.
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  Rng rng(mix_seed(seed, 0xd05a));
  for (std::size_t i = 0; i < target_n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(target_n);
  std::sort(idx.begin(), idx.end());

  PointCloud out;
  out.points.reserve(target_n);
  for (auto i : idx) out.points.push_back(cloud.points[i]);
  out.normalized = cloud.normalized;
  return out;
}

PointCloud generate_synthetic_place(std::uint64_t place_seed, std::uint64_t observation_seed,
                                    std::size_t n_points, double rotation_deg, double noise_frac,
                                    const SceneMix& mix) {
  if (n_points < 64) throw DataError("generate_synthetic_place: n_points must be >= 64");
  if (noise_frac < 0.0 || noise_frac > 1.0)
    throw DataError("generate_synthetic_place: noise_frac must be in [0,1]");
  const double frac_sum = mix.plane_frac + mix.line_frac + mix.blob_frac;
  if (!(frac_sum > 0.0)) throw DataError("generate_synthetic_place: empty scene mix");

  struct Plane {
    Point3 center;
    Point3 axis_a, axis_b;  // in-plane axes scaled by half extents
  };
  struct Line {
    Point3 center;
    Point3 axis;  // direction scaled by half length
  };
  struct Blob {
    Point3 center;
    double sigma;
  };

  Rng scene(mix_seed(place_seed, kTagScene));
  auto unit_vector = [&scene]() {
    // Marsaglia rejection on the unit sphere.
    for (;;) {
      const double a = scene.uniform(-1.0, 1.0);
      const double b = scene.uniform(-1.0, 1.0);
      const double s = a * a + b * b;
      if (s >= 1.0 || s == 0.0) continue;
      const double r = 2.0 * std::sqrt(1.0 - s);
      return Point3{a * r, b * r, 1.0 - 2.0 * s};
    }
  };
  auto cross = [](const Point3& u, const Point3& v) {
    return Point3{u.y * v.z - u.z * v.y, u.z * v.x - u.x * v.z, u.x * v.y - u.y * v.x};
  };
  auto scaled = [](const Point3& u, double s) { return Point3{u.x * s, u.y * s, u.z * s}; };

  const std::size_t n_planes = 2 + scene.below(3);
  const std::size_t n_lines = 2 + scene.below(3);
  const std::size_t n_blobs = 1 + scene.below(3);

  std::vector<Plane> planes;
  for (std::size_t i = 0; i < n_planes; ++i) {
    Plane pl;
    pl.center = {scene.uniform(-7.0, 7.0), scene.uniform(-7.0, 7.0), scene.uniform(0.0, 4.0)};
    const Point3 n = unit_vector();
    // Build an in-plane frame orthogonal to n.
    Point3 ref = std::abs(n.z) < 0.9 ? Point3{0, 0, 1} : Point3{1, 0, 0};
    Point3 a = cross(n, ref);
    const double la = std::sqrt(a.x * a.x + a.y * a.y + a.z * a.z);
    a = scaled(a, 1.0 / la);
    Point3 b = cross(n, a);
    pl.axis_a = scaled(a, scene.uniform(1.5, 4.0));
    pl.axis_b = scaled(b, scene.uniform(1.5, 4.0));
    planes.push_back(pl);
  }
  std::vector<Line> lines;
  for (std::size_t i = 0; i < n_lines; ++i) {
    Line ln;
    ln.center = {scene.uniform(-7.0, 7.0), scene.uniform(-7.0, 7.0), scene.uniform(0.0, 5.0)};
    ln.axis = scaled(unit_vector(), scene.uniform(2.0, 5.0));
    lines.push_back(ln);
  }
  std::vector<Blob> blobs;
  for (std::size_t i = 0; i < n_blobs; ++i) {
    Blob bl;
    bl.center = {scene.uniform(-7.0, 7.0), scene.uniform(-7.0, 7.0), scene.uniform(0.0, 4.0)};
    bl.sigma = scene.uniform(0.3, 1.2);
    blobs.push_back(bl);
  }

  const std::size_t n_plane_pts =
      static_cast<std::size_t>(std::floor(n_points * mix.plane_frac / frac_sum));
  const std::size_t n_line_pts =
      static_cast<std::size_t>(std::floor(n_points * mix.line_frac / frac_sum));
  const std::size_t n_blob_pts = n_points - n_plane_pts - n_line_pts;

  PointCloud cloud;
  cloud.points.reserve(n_points);
  for (std::size_t i = 0; i < n_plane_pts; ++i) {
    const Plane& pl = planes[i % planes.size()];
    const double u = scene.uniform(-1.0, 1.0), v = scene.uniform(-1.0, 1.0);
    cloud.points.push_back({pl.center.x + u * pl.axis_a.x + v * pl.axis_b.x,
                            pl.center.y + u * pl.axis_a.y + v * pl.axis_b.y,
                            pl.center.z + u * pl.axis_a.z + v * pl.axis_b.z});
  }
  for (std::size_t i = 0; i < n_line_pts; ++i) {
    const Line& ln = lines[i % lines.size()];
    const double t = scene.uniform(-1.0, 1.0);
    cloud.points.push_back(
        {ln.center.x + t * ln.axis.x, ln.center.y + t * ln.axis.y, ln.center.z + t * ln.axis.z});
  }
  for (std::size_t i = 0; i < n_blob_pts; ++i) {
    const Blob& bl = blobs[i % blobs.size()];
    cloud.points.push_back({bl.center.x + bl.sigma * scene.gaussian(),
                            bl.center.y + bl.sigma * scene.gaussian(),
                            bl.center.z + bl.sigma * scene.gaussian()});
  }

  // Observation: per-point jitter, then rotation about the z axis.
  Rng jitter(mix_seed(place_seed ^ (observation_seed * 0x9e3779b97f4a7c15ULL), kTagJitter));
  constexpr double jitter_sigma = 0.08;  // meters, pre-normalization
  for (auto& p : cloud.points) {
    p.x += jitter_sigma * jitter.gaussian();
    p.y += jitter_sigma * jitter.gaussian();
    p.z += jitter_sigma * jitter.gaussian();
  }
  const double theta = rotation_deg * 0.017453292519943295;
  const double c = std::cos(theta), s = std::sin(theta);
  for (auto& p : cloud.points) {
    const double rx = c * p.x - s * p.y;
    const double ry = s * p.x + c * p.y;
    p.x = rx;
    p.y = ry;
  }

  PointCloud out = normalize_cloud(cloud);
  replace_with_noise(out, noise_frac,
                     place_seed ^ (observation_seed * 0xbf58476d1ce4e5b9ULL));
  return out;
}

void replace_with_noise(PointCloud& cloud, double noise_frac, std::uint64_t seed) {
  if (noise_frac < 0.0 || noise_frac > 1.0)
    throw DataError("replace_with_noise: noise_frac must be in [0,1]");
  if (!cloud.normalized) throw DataError("replace_with_noise: cloud must be normalized");
  const std::size_t n = cloud.points.size();
  const std::size_t n_noise = static_cast<std::size_t>(std::floor(noise_frac * n));
  if (n_noise == 0) return;

  Rng sel(mix_seed(seed, kTagNoiseSelect));
  Rng val(mix_seed(seed, kTagNoiseValue));
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  for (std::size_t i = 0; i < n_noise; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(sel.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < n_noise; ++i) {
    cloud.points[idx[i]] = {val.uniform(-1.0, 1.0), val.uniform(-1.0, 1.0),
                            val.uniform(-1.0, 1.0)};
  }
}

DatasetManifest load_manifest(const std::string& path, double positive_radius) {
  if (!(positive_radius > 0.0)) throw DataError("load_manifest: positive_radius must be > 0");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);

  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest missing header: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,northing,easting,cloud_path")
    throw DataError("manifest header must be 'id,northing,easting,cloud_path', got '" + line +
                    "'");

  DatasetManifest manifest;
  manifest.positive_radius = positive_radius;
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.push_back("");
    if (fields.size() != 4)
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(fields.size()));
    SubmapRecord rec;
    rec.id = fields[0];
    rec.northing = parse_double(fields[1]);
    rec.easting = parse_double(fields[2]);
    rec.cloud_path = fields[3];
    if (!seen.insert(rec.id).second)
      throw DataError("manifest duplicate id '" + rec.id + "' at line " + std::to_string(line_no));
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << "id,northing,easting,cloud_path\n";
  for (const auto& rec : manifest.records) {
    out << rec.id << ',' << format_double(rec.northing) << ',' << format_double(rec.easting) << ','
        << rec.cloud_path << '\n';
  }
}

}  // namespace lpdnet
