#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lpdnet/analysis.hpp"
#include "lpdnet/gradcheck.hpp"
#include "lpdnet/pipeline.hpp"

namespace py = pybind11;
using namespace lpdnet;

namespace {

PointCloud cloud_from_array(const py::array_t<double>& points, bool normalized) {
  const auto buf = points.request();
  if (buf.ndim != 2 || buf.shape[1] != 3)
    throw DataError("points must be an (N, 3) float64 array");
  PointCloud cloud;
  cloud.normalized = normalized;
  cloud.points.resize(static_cast<std::size_t>(buf.shape[0]));
  const auto view = points.unchecked<2>();
  for (py::ssize_t i = 0; i < buf.shape[0]; ++i)
    cloud.points[static_cast<std::size_t>(i)] = {view(i, 0), view(i, 1), view(i, 2)};
  return cloud;
}

py::array_t<double> array_from_cloud(const PointCloud& cloud) {
  py::array_t<double> out({static_cast<py::ssize_t>(cloud.size()), py::ssize_t{3}});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    view(static_cast<py::ssize_t>(i), 0) = cloud.points[i].x;
    view(static_cast<py::ssize_t>(i), 1) = cloud.points[i].y;
    view(static_cast<py::ssize_t>(i), 2) = cloud.points[i].z;
  }
  return out;
}

py::array_t<double> array_from_vector(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

// Network plus its parameter store under one handle.
struct Model {
  Model(const NetworkConfig& cfg, std::uint64_t seed)
      : params(seed), net(cfg, params) {}

  ad::ParamStore params;
  Network net;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point cloud place recognition: adaptive local features, dual-space "
            "graph aggregation, NetVLAD descriptors, retrieval and analysis.";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "generate_synthetic_place",
      [](std::uint64_t place_seed, std::uint64_t observation_seed, std::size_t n_points,
         double rotation_deg, double noise_frac) {
        return array_from_cloud(generate_synthetic_place(place_seed, observation_seed, n_points,
                                                         rotation_deg, noise_frac));
      },
      py::arg("place_seed"), py::arg("observation_seed"), py::arg("n_points") = 4096,
      py::arg("rotation_deg") = 0.0, py::arg("noise_frac") = 0.0);

  m.def(
      "load_cloud",
      [](const std::string& path) { return array_from_cloud(load_cloud(path)); },
      py::arg("path"));
  m.def(
      "save_cloud",
      [](const std::string& path, const py::array_t<double>& points) {
        save_cloud(path, cloud_from_array(points, false));
      },
      py::arg("path"), py::arg("points"));
  m.def(
      "normalize_cloud",
      [](const py::array_t<double>& points) {
        return array_from_cloud(normalize_cloud(cloud_from_array(points, false)));
      },
      py::arg("points"));
  m.def(
      "downsample_random",
      [](const py::array_t<double>& points, std::size_t target_n, std::uint64_t seed) {
        return array_from_cloud(downsample_random(cloud_from_array(points, false), target_n, seed));
      },
      py::arg("points"), py::arg("target_n"), py::arg("seed"));

  m.def(
      "compute_local_features",
      [](const py::array_t<double>& points, std::size_t k_min, std::size_t k_max,
         std::size_t k_step, std::size_t threads) {
        const AdaptiveNeighborhoodConfig cfg{k_min, k_max, k_step};
        const LocalFeatureMatrix f =
            compute_local_features(cloud_from_array(points, true), cfg, threads);
        py::array_t<double> out({static_cast<py::ssize_t>(f.n_points),
                                 static_cast<py::ssize_t>(kNumLocalFeatures)});
        std::copy(f.values.begin(), f.values.end(), out.mutable_data());
        return out;
      },
      py::arg("points"), py::arg("k_min") = 10, py::arg("k_max") = 100, py::arg("k_step") = 10,
      py::arg("threads") = 1,
      "Ten adaptive local features per point of a normalized cloud.");

  py::class_<KdTree>(m, "KdTree")
      .def(py::init([](const py::array_t<double>& points, std::size_t leaf_size) {
             const auto buf = points.request();
             if (buf.ndim != 2) throw DataError("points must be 2-D");
             std::vector<double> flat(points.data(), points.data() + buf.shape[0] * buf.shape[1]);
             return KdTree::from_flat(flat, static_cast<std::size_t>(buf.shape[1]), leaf_size);
           }),
           py::arg("points"), py::arg("leaf_size") = 16)
      .def_property_readonly("size", &KdTree::size)
      .def_property_readonly("dimension", &KdTree::dimension)
      .def(
          "knn",
          [](const KdTree& tree, const py::array_t<double>& query, std::size_t k,
             std::optional<std::size_t> exclude) {
            std::vector<double> q(query.data(), query.data() + query.size());
            const NeighborList nn = tree.knn(q, k, exclude);
            return py::make_tuple(nn.indices, nn.distances);
          },
          py::arg("query"), py::arg("k"), py::arg("exclude") = py::none(),
          "Exact k nearest neighbors: (indices, squared distances), ascending.");

  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init<>())
      .def_readwrite("n_points", &NetworkConfig::n_points)
      .def_readwrite("kf", &NetworkConfig::kf)
      .def_readwrite("kc", &NetworkConfig::kc)
      .def_readwrite("vlad_clusters", &NetworkConfig::vlad_clusters)
      .def_readwrite("output_dim", &NetworkConfig::output_dim)
      .def_readwrite("use_local_features", &NetworkConfig::use_local_features)
      .def_property(
          "relation", [](const NetworkConfig& c) { return to_string(c.relation); },
          [](NetworkConfig& c, const std::string& v) { c.relation = relation_variant_from_string(v); })
      .def_property(
          "aggregation", [](const NetworkConfig& c) { return to_string(c.aggregation); },
          [](NetworkConfig& c, const std::string& v) {
            c.aggregation = aggregation_variant_from_string(v);
          })
      .def_property(
          "neighborhood_grid",
          [](const NetworkConfig& c) {
            return py::make_tuple(c.neighborhood.k_min, c.neighborhood.k_max,
                                  c.neighborhood.k_step);
          },
          [](NetworkConfig& c, py::tuple t) {
            c.neighborhood = {t[0].cast<std::size_t>(), t[1].cast<std::size_t>(),
                              t[2].cast<std::size_t>()};
          })
      .def_static("desk_scale", &NetworkConfig::desk_scale, py::arg("factor"),
                  py::arg("n_points"))
      .def("save", &save_network_config, py::arg("path"),
           py::call_guard<py::gil_scoped_release>())
      .def_static("load", &load_network_config, py::arg("path"));

  py::class_<Model>(m, "Model")
      .def(py::init<const NetworkConfig&, std::uint64_t>(), py::arg("config"),
           py::arg("seed") = 42)
      .def_property_readonly("parameter_count",
                             [](const Model& model) { return model.params.total_elements(); })
      .def("load_checkpoint", [](Model& model, const std::string& path) { model.params.load(path); })
      .def("save_checkpoint",
           [](const Model& model, const std::string& path) { model.params.save(path); })
      .def(
          "descriptor",
          [](Model& model, const py::array_t<double>& points, std::size_t threads) {
            const PointCloud cloud = cloud_from_array(points, true);
            const CloudInput input = model.net.prepare(cloud, threads);
            return array_from_vector(model.net.descriptor(input).values);
          },
          py::arg("points"), py::arg("threads") = 1,
          "Unit-norm global descriptor of a normalized cloud.");

  m.def(
      "lazy_quadruplet_loss",
      [](const std::vector<double>& d_pos, const std::vector<double>& d_neg,
         const std::vector<double>& d_other, double alpha, double beta) {
        return lazy_quadruplet_loss(d_pos, d_neg, d_other, LossConfig{alpha, beta});
      },
      py::arg("d_pos"), py::arg("d_neg"), py::arg("d_other"), py::arg("alpha") = 0.5,
      py::arg("beta") = 0.2);

  m.def(
      "train_synthetic",
      [](Model& model, std::size_t places, std::size_t observations, std::size_t train_obs,
         std::size_t epochs, double lr, std::size_t batch, std::size_t p_pos, std::size_t p_neg,
         std::uint64_t seed, std::size_t threads, const std::string& checkpoint_path) {
        SyntheticPlaceDatabase db(places, observations, model.net.config().n_points, seed);
        InputCache cache(model.net, db, threads);
        std::vector<std::size_t> items;
        const std::size_t split = train_obs == 0 ? observations : train_obs;
        for (std::size_t p = 0; p < places; ++p)
          for (std::size_t o = 0; o < split; ++o) items.push_back(p * observations + o);
        TrainConfig tcfg;
        tcfg.epochs = epochs;
        tcfg.learning_rate = lr;
        tcfg.batch_quadruplets = batch;
        tcfg.p_pos = p_pos;
        tcfg.p_neg = p_neg;
        tcfg.seed = seed;
        tcfg.threads = threads;
        const TrainResult result =
            train(db, items, model.net, cache, tcfg, LossConfig{}, checkpoint_path, "");
        return result.epoch_mean_loss;
      },
      py::arg("model"), py::arg("places"), py::arg("observations"), py::arg("train_obs") = 0,
      py::arg("epochs") = 5, py::arg("lr") = 1e-3, py::arg("batch") = 2, py::arg("p_pos") = 2,
      py::arg("p_neg") = 18, py::arg("seed") = 42, py::arg("threads") = 1,
      py::arg("checkpoint_path") = std::string{},
      "Train on a synthetic place grid; returns per-epoch mean loss.");

  py::class_<DescriptorIndex>(m, "DescriptorIndex")
      .def(py::init<>())
      .def("add",
           [](DescriptorIndex& index, const std::string& id, const std::vector<double>& d) {
             index.add(id, d);
           })
      .def_property_readonly("size", &DescriptorIndex::size)
      .def_property_readonly("ids", &DescriptorIndex::ids)
      .def("save", &DescriptorIndex::save)
      .def_static("load", &DescriptorIndex::load)
      .def(
          "query",
          [](const DescriptorIndex& index, const std::vector<double>& q, std::size_t n) {
            std::vector<std::pair<std::string, double>> out;
            for (const auto& hit : query_topn(index, q, n)) out.emplace_back(hit.id, hit.distance);
            return out;
          },
          py::arg("query"), py::arg("n"),
          "Exact top-N by L2 distance: list of (id, distance), ascending.");

  m.def("uniqueness", [](const DescriptorIndex& index) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& s : uniqueness(index)) out.emplace_back(s.id, s.score);
    return out;
  });
  m.def(
      "cluster_descriptors",
      [](const DescriptorIndex& index, std::size_t k, std::uint64_t seed) {
        const ClusterResult r = cluster_descriptors(index, k, seed);
        return py::make_tuple(r.labels, r.wcss);
      },
      py::arg("index"), py::arg("k"), py::arg("seed") = 42);

  m.def(
      "run_gradcheck",
      [](std::uint64_t seed) {
        const GradcheckResult r = run_gradcheck(gradcheck_config(), seed);
        return py::make_tuple(r.worst_primitive, r.full_network);
      },
      py::arg("seed") = 42,
      "Finite-difference check of primitives and the composed network; "
      "returns (worst primitive rel err, full network rel err).");
}
