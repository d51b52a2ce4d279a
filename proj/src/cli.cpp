#include "lpdnet/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "lpdnet/analysis.hpp"
#include "lpdnet/gradcheck.hpp"
#include "lpdnet/pipeline.hpp"

namespace lpdnet {

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("LPD_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw DataError("LPD_SEED is not a valid integer");
    }
  }
  return 42;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(item));
  if (out.empty()) throw DataError("empty list: '" + s + "'");
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(s)) out.push_back(static_cast<std::size_t>(v));
  return out;
}

// "places=50 obs=5" tokens of the --synthetic option.
struct SyntheticSpec {
  std::size_t places = 0;
  std::size_t observations = 0;
};

SyntheticSpec parse_synthetic_spec(const std::vector<std::string>& tokens) {
  SyntheticSpec spec;
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--synthetic expects key=value tokens, got '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const std::string value = tok.substr(eq + 1);
    if (key == "places") spec.places = std::stoull(value);
    else if (key == "obs") spec.observations = std::stoull(value);
    else throw CLI::ValidationError("--synthetic: unknown key '" + key + "'");
  }
  if (spec.places == 0 || spec.observations == 0)
    throw CLI::ValidationError("--synthetic requires places=N obs=M");
  return spec;
}

NetworkConfig resolve_config(const std::string& config_path, std::size_t n_points_flag) {
  if (!config_path.empty()) return load_network_config(config_path);
  NetworkConfig cfg;
  cfg.n_points = n_points_flag;
  return cfg;
}

// Checkpoints travel with a <ckpt>.cfg sidecar so eval-side commands can
// rebuild the network without a separate --config flag.
NetworkConfig config_for_checkpoint(const std::string& ckpt, const std::string& config_path) {
  if (!config_path.empty()) return load_network_config(config_path);
  const std::string sidecar = ckpt + ".cfg";
  if (!std::filesystem::exists(sidecar))
    throw DataError("no config sidecar '" + sidecar + "'; pass --config");
  return load_network_config(sidecar);
}

PointCloud load_query_cloud(const std::string& path, const NetworkConfig& cfg,
                            std::uint64_t seed) {
  PointCloud cloud = load_cloud(path);
  if (cloud.size() > cfg.n_points)
    cloud = downsample_random(cloud, cfg.n_points, mix_seed(seed, 0x40));
  return normalize_cloud(cloud);
}

}  // namespace

int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Point cloud place recognition pipeline"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t threads = 1;
  try {
    seed = default_seed();
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  app.add_option("--seed", seed, "Seed for all randomness (env LPD_SEED overrides the default)");
  app.add_option("--threads", threads, "Worker thread bound (results are thread-count independent)");

  // extract
  auto* extract = app.add_subcommand("extract", "Dump the ten local features of a cloud to CSV");
  std::string extract_cloud, extract_out;
  AdaptiveNeighborhoodConfig extract_cfg;
  extract->add_option("--cloud", extract_cloud, "Input cloud file")->required();
  extract->add_option("--out", extract_out, "Output CSV path")->required();
  extract->add_option("--kmin", extract_cfg.k_min, "Smallest candidate neighbor count");
  extract->add_option("--kmax", extract_cfg.k_max, "Largest candidate neighbor count");
  extract->add_option("--kstep", extract_cfg.k_step, "Candidate grid step");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate synthetic clouds or a whole dataset");
  std::uint64_t synth_place_seed = 1, synth_obs_seed = 1;
  std::size_t synth_n = 4096, synth_places = 0, synth_obs = 0;
  double synth_rotation = 0.0, synth_noise = 0.0;
  std::string synth_out, synth_outdir, synth_manifest;
  synth->add_option("--place-seed", synth_place_seed, "Scene structure seed");
  synth->add_option("--obs-seed", synth_obs_seed, "Observation seed");
  synth->add_option("--n", synth_n, "Points per cloud");
  synth->add_option("--rotation", synth_rotation, "Z-axis rotation in degrees");
  synth->add_option("--noise", synth_noise, "Fraction of points replaced by uniform noise");
  synth->add_option("--out", synth_out, "Single cloud output file");
  synth->add_option("--places", synth_places, "Dataset mode: number of places");
  synth->add_option("--obs", synth_obs, "Dataset mode: observations per place");
  synth->add_option("--outdir", synth_outdir, "Dataset mode: cloud output directory");
  synth->add_option("--manifest", synth_manifest, "Dataset mode: manifest CSV path");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the descriptor network");
  std::vector<std::string> train_synth_tokens;
  std::string train_manifest, train_config, train_out, train_trace;
  std::size_t train_n = 4096, train_obs_split = 0;
  TrainConfig tcfg;
  train_cmd->add_option("--synthetic", train_synth_tokens, "Synthetic dataset, e.g. places=50 obs=5")
      ->expected(-1);
  train_cmd->add_option("--manifest", train_manifest, "Manifest CSV of training submaps");
  train_cmd->add_option("--config", train_config, "Network config file");
  train_cmd->add_option("--out", train_out, "Checkpoint output path")->required();
  train_cmd->add_option("--trace", train_trace, "Loss trace CSV (default <out>.trace.csv)");
  train_cmd->add_option("--n", train_n, "Points per cloud when no --config is given");
  train_cmd->add_option("--train-obs", train_obs_split,
                        "Synthetic mode: observations per place used for training (default all)");
  train_cmd->add_option("--epochs", tcfg.epochs, "Training epochs");
  train_cmd->add_option("--lr", tcfg.learning_rate, "Learning rate");
  train_cmd->add_option("--batch", tcfg.batch_quadruplets, "Quadruplets per optimizer step");
  train_cmd->add_option("--quads-per-epoch", tcfg.quads_per_epoch,
                        "Quadruplets per epoch (default: one per training item)");
  train_cmd->add_option("--p-pos", tcfg.p_pos, "Positives per quadruplet");
  train_cmd->add_option("--p-neg", tcfg.p_neg, "Negatives per quadruplet");
  double loss_alpha = 0.5, loss_beta = 0.2;
  train_cmd->add_option("--alpha", loss_alpha, "First hinge margin");
  train_cmd->add_option("--beta", loss_beta, "Second hinge margin");

  // index
  auto* index_cmd = app.add_subcommand("index", "Build a descriptor index from a manifest");
  std::string index_manifest, index_ckpt, index_config, index_out;
  double index_radius = 25.0;
  index_cmd->add_option("--manifest", index_manifest, "Manifest CSV")->required();
  index_cmd->add_option("--ckpt", index_ckpt, "Trained checkpoint")->required();
  index_cmd->add_option("--config", index_config, "Network config (default: <ckpt>.cfg)");
  index_cmd->add_option("--out", index_out, "Index output path")->required();
  index_cmd->add_option("--radius", index_radius, "Positive radius in meters");

  // query
  auto* query_cmd = app.add_subcommand("query", "Query an index with a cloud");
  std::string query_index, query_ckpt, query_config, query_cloud;
  std::size_t query_n = 5;
  query_cmd->add_option("--index", query_index, "Index file")->required();
  query_cmd->add_option("--ckpt", query_ckpt, "Trained checkpoint")->required();
  query_cmd->add_option("--config", query_config, "Network config (default: <ckpt>.cfg)");
  query_cmd->add_option("--cloud", query_cloud, "Query cloud file")->required();
  query_cmd->add_option("--n", query_n, "Number of results");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Retrieval evaluation (Recall@N, Recall@1%)");
  std::vector<std::string> eval_synth_tokens;
  std::string eval_manifest, eval_ckpt, eval_config, eval_out;
  std::size_t eval_train_obs = 3;
  std::string eval_ns = "1,5,10,25";
  double eval_radius = 25.0;
  eval_cmd->add_option("--synthetic", eval_synth_tokens, "Synthetic dataset, e.g. places=50 obs=5")
      ->expected(-1);
  eval_cmd->add_option("--manifest", eval_manifest, "Manifest CSV");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Trained checkpoint")->required();
  eval_cmd->add_option("--config", eval_config, "Network config (default: <ckpt>.cfg)");
  eval_cmd->add_option("--out", eval_out, "Recall report CSV")->required();
  eval_cmd->add_option("--train-obs", eval_train_obs,
                       "Synthetic mode: database observations per place");
  eval_cmd->add_option("--ns", eval_ns, "Comma-separated recall depths");
  eval_cmd->add_option("--radius", eval_radius, "Positive radius in meters (manifest mode)");

  // robustness
  auto* rob_cmd = app.add_subcommand("robustness", "Rotation + noise robustness protocol");
  std::string rob_ckpt, rob_config, rob_out;
  std::string rob_angles = "1,2,3,4,5,10,20,30";
  double rob_noise = 0.1;
  std::size_t rob_repeats = 8, rob_places = 50;
  rob_cmd->add_option("--ckpt", rob_ckpt, "Trained checkpoint")->required();
  rob_cmd->add_option("--config", rob_config, "Network config (default: <ckpt>.cfg)");
  rob_cmd->add_option("--angles", rob_angles, "Comma-separated rotation angles in degrees");
  rob_cmd->add_option("--noise", rob_noise, "Noise fraction per query");
  rob_cmd->add_option("--repeats", rob_repeats, "Seeded repetitions per angle");
  rob_cmd->add_option("--places", rob_places, "Number of synthetic places");
  rob_cmd->add_option("--out", rob_out, "Robustness CSV")->required();

  // analyze
  auto* analyze_cmd = app.add_subcommand("analyze", "Descriptor-space environment analysis");
  std::string an_index, an_mode, an_id, an_out;
  std::size_t an_k = 2;
  analyze_cmd->add_option("--index", an_index, "Index file")->required();
  analyze_cmd->add_option("--mode", an_mode, "similarity | uniqueness | cluster")->required();
  analyze_cmd->add_option("--id", an_id, "Reference id (similarity mode)");
  analyze_cmd->add_option("--k", an_k, "Cluster count (cluster mode)");
  analyze_cmd->add_option("--out", an_out, "Output CSV")->required();

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::string grad_config;
  grad_cmd->add_option("--config", grad_config, "Network config (default: built-in toy profile)");

  try {
    std::vector<std::string> argv(args);
    argv.insert(argv.begin(), "lpd");
    std::vector<const char*> raw;
    raw.reserve(argv.size());
    for (const auto& a : argv) raw.push_back(a.c_str());
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << app.help();
    return 1;
  }

  try {
    if (extract->parsed()) {
      const PointCloud cloud = normalize_cloud(load_cloud(extract_cloud));
      const LocalFeatureMatrix features = compute_local_features(cloud, extract_cfg, threads);
      save_feature_csv(extract_out, features);
      out << "wrote " << features.n_points << " feature rows to " << extract_out << "\n";
      return 0;
    }

    if (synth->parsed()) {
      const bool dataset_mode = synth_places > 0 || synth_obs > 0;
      if (dataset_mode) {
        if (synth_places == 0 || synth_obs == 0 || synth_outdir.empty() || synth_manifest.empty())
          throw DataError("dataset mode needs --places, --obs, --outdir and --manifest");
        std::filesystem::create_directories(synth_outdir);
        SyntheticPlaceDatabase db(synth_places, synth_obs, synth_n, seed, synth_rotation,
                                  synth_noise);
        DatasetManifest manifest;
        for (std::size_t item = 0; item < db.size(); ++item) {
          const std::string id = db.id(item);
          const std::string path = synth_outdir + "/" + id + ".bin";
          save_cloud(path, db.cloud(item));
          // Places sit 100 m apart on a line; observations share a position.
          manifest.records.push_back(
              {id, 100.0 * static_cast<double>(item / synth_obs), 0.0, path});
        }
        save_manifest(synth_manifest, manifest);
        out << "wrote " << db.size() << " clouds to " << synth_outdir << " and manifest "
            << synth_manifest << "\n";
      } else {
        if (synth_out.empty()) throw DataError("single-cloud mode needs --out");
        const PointCloud cloud = generate_synthetic_place(synth_place_seed, synth_obs_seed,
                                                          synth_n, synth_rotation, synth_noise);
        save_cloud(synth_out, cloud);
        out << "wrote " << cloud.size() << " points to " << synth_out << "\n";
      }
      return 0;
    }

    if (train_cmd->parsed()) {
      if (train_synth_tokens.empty() == train_manifest.empty())
        throw DataError("train needs exactly one of --synthetic or --manifest");
      tcfg.seed = seed;
      tcfg.threads = threads;
      LossConfig lcfg{loss_alpha, loss_beta};
      const std::string trace = train_trace.empty() ? train_out + ".trace.csv" : train_trace;

      std::unique_ptr<PlaceDatabase> db;
      std::vector<std::size_t> train_items;
      NetworkConfig cfg = resolve_config(train_config, train_n);
      if (!train_synth_tokens.empty()) {
        const SyntheticSpec spec = parse_synthetic_spec(train_synth_tokens);
        auto sdb = std::make_unique<SyntheticPlaceDatabase>(spec.places, spec.observations,
                                                            cfg.n_points, seed);
        const std::size_t split = train_obs_split == 0 ? spec.observations : train_obs_split;
        for (std::size_t p = 0; p < spec.places; ++p)
          for (std::size_t o = 0; o < split; ++o)
            train_items.push_back(p * spec.observations + o);
        db = std::move(sdb);
      } else {
        auto mdb = std::make_unique<ManifestPlaceDatabase>(load_manifest(train_manifest),
                                                           cfg.n_points, seed);
        train_items.resize(mdb->size());
        std::iota(train_items.begin(), train_items.end(), std::size_t{0});
        db = std::move(mdb);
      }

      ad::ParamStore params(seed);
      Network net(cfg, params);
      InputCache cache(net, *db, threads);
      out << "training on " << train_items.size() << " items, " << params.total_elements()
          << " parameters\n";
      const TrainResult result =
          train(*db, train_items, net, cache, tcfg, lcfg, train_out, trace);
      save_network_config(train_out + ".cfg", cfg);
      out << "final epoch mean loss " << format_double(result.epoch_mean_loss.back())
          << "; checkpoint " << train_out << "\n";
      return 0;
    }

    if (index_cmd->parsed()) {
      const NetworkConfig cfg = config_for_checkpoint(index_ckpt, index_config);
      ad::ParamStore params(seed);
      Network net(cfg, params);
      params.load(index_ckpt);
      ManifestPlaceDatabase db(load_manifest(index_manifest, index_radius), cfg.n_points, seed);
      InputCache cache(net, db, threads);
      std::vector<std::size_t> items(db.size());
      std::iota(items.begin(), items.end(), std::size_t{0});
      const DescriptorIndex index = build_index(net, db, cache, items, threads);
      index.save(index_out);
      out << "indexed " << index.size() << " submaps to " << index_out << "\n";
      return 0;
    }

    if (query_cmd->parsed()) {
      const NetworkConfig cfg = config_for_checkpoint(query_ckpt, query_config);
      ad::ParamStore params(seed);
      Network net(cfg, params);
      params.load(query_ckpt);
      const DescriptorIndex index = DescriptorIndex::load(query_index);
      const PointCloud cloud = load_query_cloud(query_cloud, cfg, seed);
      const GlobalDescriptor d = net.descriptor(net.prepare(cloud, threads));
      for (const auto& hit : query_topn(index, d.values, query_n))
        out << hit.id << ',' << format_double(hit.distance) << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      if (eval_synth_tokens.empty() == eval_manifest.empty())
        throw DataError("eval needs exactly one of --synthetic or --manifest");
      const NetworkConfig cfg = config_for_checkpoint(eval_ckpt, eval_config);
      ad::ParamStore params(seed);
      Network net(cfg, params);
      params.load(eval_ckpt);
      const std::vector<std::size_t> ns = parse_size_list(eval_ns);

      RecallReport report;
      if (!eval_synth_tokens.empty()) {
        const SyntheticSpec spec = parse_synthetic_spec(eval_synth_tokens);
        SyntheticPlaceDatabase db(spec.places, spec.observations, cfg.n_points, seed);
        InputCache cache(net, db, threads);
        report = evaluate_synthetic(net, db, cache, eval_train_obs, ns, threads);
      } else {
        ManifestPlaceDatabase db(load_manifest(eval_manifest, eval_radius), cfg.n_points, seed);
        InputCache cache(net, db, threads);
        report = evaluate_manifest(net, db, cache, ns, threads);
      }
      save_recall_csv(eval_out, report);
      out << "queries: " << report.num_queries << ", recall@1: "
          << format_double(report.recall_at.count(1) ? report.recall_at.at(1) : 0.0)
          << ", recall@1%: " << format_double(report.recall_at_1pct) << "\n";
      return 0;
    }

    if (rob_cmd->parsed()) {
      const NetworkConfig cfg = config_for_checkpoint(rob_ckpt, rob_config);
      ad::ParamStore params(seed);
      Network net(cfg, params);
      params.load(rob_ckpt);
      SyntheticPlaceDatabase db(rob_places, 1, cfg.n_points, seed);
      InputCache cache(net, db, threads);
      std::vector<std::uint64_t> repeat_seeds(rob_repeats);
      for (std::size_t r = 0; r < rob_repeats; ++r) repeat_seeds[r] = mix_seed(seed, 0x700 + r);
      const auto rows =
          robustness_eval(net, db, cache, parse_double_list(rob_angles), rob_noise, repeat_seeds,
                          threads);
      save_robustness_csv(rob_out, rows);
      for (const auto& row : rows)
        out << "angle " << format_double(row.angle_deg) << ": mean "
            << format_double(row.mean_mistakes) << ", max " << format_double(row.max_mistakes)
            << "\n";
      return 0;
    }

    if (analyze_cmd->parsed()) {
      const DescriptorIndex index = DescriptorIndex::load(an_index);
      if (an_mode == "similarity") {
        if (an_id.empty()) throw DataError("similarity mode needs --id");
        save_similarity_csv(an_out, similarity_map(index, an_id));
      } else if (an_mode == "uniqueness") {
        save_uniqueness_csv(an_out, uniqueness(index));
      } else if (an_mode == "cluster") {
        const ClusterResult result = cluster_descriptors(index, an_k, seed);
        save_cluster_csv(an_out, index, result);
        out << "wcss " << format_double(result.wcss) << " after " << result.iterations
            << " iterations\n";
      } else {
        throw DataError("unknown analyze mode '" + an_mode + "'");
      }
      return 0;
    }

    if (grad_cmd->parsed()) {
      const NetworkConfig cfg =
          grad_config.empty() ? gradcheck_config() : load_network_config(grad_config);
      const GradcheckResult result = run_gradcheck(cfg, seed);
      for (const auto& e : result.primitives)
        out << "primitive " << e.name << ": rel err " << format_double(e.rel_err) << "\n";
      out << "worst primitive rel err: " << format_double(result.worst_primitive) << "\n";
      out << "full network rel err: " << format_double(result.full_network) << " ["
          << result.full_network_worst_param << "]\n";
      out << "parameters: " << result.parameter_count << "\n";
      if (!result.primitives_pass() || !result.full_pass()) {
        err << "error: gradient check failed\n";
        return 3;
      }
      return 0;
    }
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace lpdnet
