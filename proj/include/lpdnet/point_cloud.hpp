#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpdnet/common.hpp"

namespace lpdnet {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Ordered point set. `normalized` means every coordinate lies in [-1, 1]
// after centering and uniform scaling.
struct PointCloud {
  std::vector<Point3> points;
  bool normalized = false;

  std::size_t size() const { return points.size(); }
};

struct SubmapRecord {
  std::string id;
  double northing = 0.0;
  double easting = 0.0;
  std::string cloud_path;
};

struct DatasetManifest {
  std::vector<SubmapRecord> records;
  double positive_radius = 25.0;  // meters; two submaps within this radius are the same place
};

// Mix of structure types emitted by the synthetic scene generator. The
// defaults produce all three eigenstructure regimes (lines, planes, volumes).
struct SceneMix {
  double plane_frac = 0.5;
  double line_frac = 0.3;
  double blob_frac = 0.2;
};

// Raw cloud files are headerless little-endian float64 triples (x,y,z).
PointCloud load_cloud(const std::string& path, std::optional<std::size_t> expected_n = {});
void save_cloud(const std::string& path, const PointCloud& cloud);

// Center at the centroid, then scale uniformly so max |coordinate| becomes 1.
PointCloud normalize_cloud(const PointCloud& cloud);

// Deterministic sampling without replacement; preserves input order of the
// selected points. Identity when the cloud already has target_n points.
PointCloud downsample_random(const PointCloud& cloud, std::size_t target_n, std::uint64_t seed);

// Structured scene (planes + lines + blobs) fixed by place_seed; jitter,
// z-rotation, and noise replacement driven by observation_seed. Output is
// normalized.
PointCloud generate_synthetic_place(std::uint64_t place_seed, std::uint64_t observation_seed,
                                    std::size_t n_points, double rotation_deg, double noise_frac,
                                    const SceneMix& mix = {});

// Replace floor(noise_frac * n) distinct points with uniform noise in
// [-1,1]^3. The cloud must be normalized so containment is preserved.
void replace_with_noise(PointCloud& cloud, double noise_frac, std::uint64_t seed);

// CSV manifest with header "id,northing,easting,cloud_path".
DatasetManifest load_manifest(const std::string& path, double positive_radius = 25.0);
void save_manifest(const std::string& path, const DatasetManifest& manifest);

}  // namespace lpdnet
