#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lpdnet/cli.hpp"
#include "lpdnet/gradcheck.hpp"
#include "lpdnet/network.hpp"
#include "lpdnet/point_cloud.hpp"

using namespace lpdnet;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "lpd_cli_test";
  fs::create_directories(dir);
  return dir;
}

std::string toy_config_path() {
  const fs::path path = work_dir() / "toy.cfg";
  NetworkConfig cfg = gradcheck_config();
  cfg.n_points = 96;
  cfg.neighborhood = {4, 12, 4};
  cfg.kf = 4;
  cfg.kc = 4;
  save_network_config(path.string(), cfg);
  return path.string();
}

}  // namespace

TEST_CASE("missing flags yield exit 1 and usage text") {
  const CliResult r = run({"eval"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") == 0);
  CHECK(r.err.find("--ckpt") != std::string::npos);
}

TEST_CASE("unknown flags are rejected") {
  const CliResult r = run({"extract", "--cloud", "x.bin", "--out", "y.csv", "--frobnicate"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") == 0);
}

TEST_CASE("help exits 0 for the app and every subcommand") {
  CHECK(run({"--help"}).code == 0);
  for (const std::string sub :
       {"extract", "synth", "train", "index", "query", "eval", "robustness", "analyze",
        "gradcheck"}) {
    const CliResult r = run({sub, "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("--help") != std::string::npos);
  }
}

TEST_CASE("missing data files yield exit 2 with the error prefix") {
  const CliResult r =
      run({"extract", "--cloud", "/nonexistent/cloud.bin", "--out", "/tmp/x.csv"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error:", 0) == 0);
}

TEST_CASE("synth then extract produces a well-formed feature CSV") {
  const fs::path dir = work_dir();
  const std::string cloud = (dir / "scene.bin").string();
  const std::string csv = (dir / "scene.csv").string();
  CliResult r = run({"synth", "--place-seed", "3", "--obs-seed", "1", "--n", "128", "--out", cloud});
  REQUIRE(r.code == 0);
  r = run({"extract", "--cloud", cloud, "--out", csv, "--kmin", "4", "--kmax", "12", "--kstep",
           "4"});
  REQUIRE(r.code == 0);

  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "index,C,O,L,A,D,S2D,L2D,V,dZmax,sZvar");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 128);
}

TEST_CASE("end-to-end: synth dataset, train, index, query, eval, analyze") {
  const fs::path dir = work_dir() / "e2e";
  fs::create_directories(dir);
  const std::string cfg = toy_config_path();
  const std::string clouds = (dir / "clouds").string();
  const std::string manifest = (dir / "manifest.csv").string();
  const std::string ckpt = (dir / "model.bin").string();
  const std::string index = (dir / "index.bin").string();

  CliResult r = run({"--seed", "7", "synth", "--places", "6", "--obs", "2", "--n", "96",
                     "--outdir", clouds, "--manifest", manifest});
  REQUIRE(r.code == 0);

  r = run({"--seed", "7", "train", "--synthetic", "places=6", "obs=2", "--config", cfg, "--out",
           ckpt, "--epochs", "1", "--p-pos", "1", "--p-neg", "3", "--quads-per-epoch", "2"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".cfg"));
  CHECK(fs::exists(ckpt + ".trace.csv"));

  r = run({"--seed", "7", "index", "--manifest", manifest, "--ckpt", ckpt, "--out", index});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(index));

  const std::string query_cloud = (dir / "clouds/p2_o0.bin").string();
  r = run({"--seed", "7", "query", "--index", index, "--ckpt", ckpt, "--cloud", query_cloud,
           "--n", "5"});
  REQUIRE(r.code == 0);
  // 5 CSV rows, ascending distance, the identical submap first at ~0.
  std::istringstream lines(r.out);
  std::string line;
  double prev = -1.0;
  std::size_t rows = 0;
  std::string first_id;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    if (rows == 0) first_id = line.substr(0, comma);
    const double dist = parse_double(line.substr(comma + 1));
    CHECK(dist >= prev);
    prev = dist;
    ++rows;
  }
  CHECK(rows == 5);
  CHECK(first_id == "p2_o0");

  const std::string report = (dir / "recall.csv").string();
  r = run({"--seed", "7", "eval", "--synthetic", "places=6", "obs=2", "--train-obs", "1",
           "--ckpt", ckpt, "--out", report, "--ns", "1,3"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(report));

  const std::string unique_csv = (dir / "unique.csv").string();
  r = run({"analyze", "--index", index, "--mode", "uniqueness", "--out", unique_csv});
  REQUIRE(r.code == 0);
  std::ifstream uf(unique_csv);
  std::getline(uf, line);
  CHECK(line == "id,score");

  const std::string cluster_csv = (dir / "cluster.csv").string();
  r = run({"--seed", "7", "analyze", "--index", index, "--mode", "cluster", "--k", "3", "--out",
           cluster_csv});
  REQUIRE(r.code == 0);

  const std::string sim_csv = (dir / "sim.csv").string();
  r = run({"analyze", "--index", index, "--mode", "similarity", "--id", "p0_o0", "--out",
           sim_csv});
  REQUIRE(r.code == 0);

  fs::remove_all(dir);
}

TEST_CASE("gradcheck command reports a small worst error") {
  const CliResult r = run({"gradcheck"});
  CHECK(r.code == 0);
  CHECK(r.out.find("full network rel err") != std::string::npos);
  CHECK(r.out.find("parameters:") != std::string::npos);
}

TEST_CASE("identical seeds reproduce identical output files") {
  const fs::path dir = work_dir() / "determinism";
  fs::create_directories(dir);
  const std::string a = (dir / "a.bin").string();
  const std::string b = (dir / "b.bin").string();
  REQUIRE(run({"--seed", "5", "synth", "--place-seed", "9", "--obs-seed", "2", "--n", "128",
               "--out", a})
              .code == 0);
  REQUIRE(run({"--seed", "5", "synth", "--place-seed", "9", "--obs-seed", "2", "--n", "128",
               "--out", b})
              .code == 0);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(fa)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(fb)), {});
  CHECK(bytes_a == bytes_b);
  fs::remove_all(dir);
}
