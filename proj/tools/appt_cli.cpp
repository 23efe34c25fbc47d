#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "appt/appt.hpp"

namespace fs = std::filesystem;
using namespace appt;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : Error {
  using Error::Error;
};

struct Globals {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
};

void ensure_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  const fs::path probe = dir / ".appt_write_probe";
  write_file_atomic(probe, "");
  fs::remove(probe, ec);
}

Json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON: " + e.what());
  }
}

/// Accepts either a run configuration or a bare network object.
NetworkConfig network_config_file(const fs::path& path) {
  const Json j = read_json(path);
  if (j.is_object() && j.contains("network")) return run_config_from_json(j).network;
  return network_from_json(j, "network");
}

std::string cloud_name(std::string_view prefix, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%04zu.cloud", i);
  return std::string(prefix) + buf;
}

/// Writes clouds plus `manifest.csv` (file,kind,class,labels,points).
void write_clouds(const fs::path& dir, const std::vector<PointCloud>& clouds, const std::vector<std::string>& kinds) {
  ensure_writable(dir);
  std::string manifest = "file,kind,class,labels,points\n";
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const std::string name = cloud_name(kinds[i], i);
    save_cloud(clouds[i], dir / name);
    const auto& c = clouds[i];
    manifest += name + "," + kinds[i] + "," + (c.cloud_class() ? std::to_string(*c.cloud_class()) : "") + "," +
                (c.has_labels() ? "1" : "0") + "," + std::to_string(c.size()) + "\n";
  }
  write_file_atomic(dir / "manifest.csv", manifest);
}

std::vector<std::string> kind_names(const DatasetSpec& spec, std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.emplace_back(kind_name(spec.kinds[i % spec.kinds.size()]));
  return out;
}

void write_json(const fs::path& path, const Json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::vector<PointCloud> load_data(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p))
        if (e.path().extension() == ".cloud") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      if (found.empty()) throw InputError("no .cloud files in '" + p.string() + "'");
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }
  std::vector<PointCloud> out;
  for (const auto& f : files) out.push_back(load_cloud(f));
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen(const Globals& g, const std::string& kind_arg, long long n, long long count) {
  const ShapeKind kind = parse_kind(kind_arg);
  if (n < 8) throw UsageError("--n must be at least 8");
  if (count < 1) throw UsageError("--count must be positive");
  const fs::path out(g.out);
  const std::uint64_t seed = g.seed.value_or(0);
  const CounterRng rng(seed, "gen");
  std::vector<PointCloud> clouds;
  for (long long i = 0; i < count; ++i)
    clouds.push_back(generate_synthetic(kind, static_cast<std::size_t>(n), rng.word(static_cast<std::uint64_t>(i))));
  if (g.dry_run) {
    std::cout << "would write " << count << " clouds of " << n << " points to " << out.string() << "\n";
    return kOk;
  }
  write_clouds(out, clouds, std::vector<std::string>(clouds.size(), std::string(kind_name(kind))));
  std::cout << "wrote " << count << " clouds to " << out.string() << "\n";
  return kOk;
}

int cmd_train(const Globals& g, bool export_data, bool quiet) {
  if (g.config.empty()) throw UsageError("train needs --config");
  RunConfig rc = run_config_from_json(read_json(g.config));
  if (g.seed) rc.train.seed = *g.seed;
  rc.network.seed = rc.train.seed;
  const ParamStore params = init_network(rc.network);
  const std::size_t count = param_count(rc.network);
  if (params.scalar_count() != count) throw StateError("parameter count mismatch");
  if (g.dry_run) {
    std::cout << "param_count " << count << "\n";
    return kOk;
  }
  const fs::path out(g.out);
  ensure_writable(out);
  const Dataset data = make_dataset(rc.network.task, rc.train.dataset, rc.train.seed);
  if (export_data) {
    write_clouds(out / "data" / "train", data.train, kind_names(rc.train.dataset, data.train.size()));
    if (!data.test.empty()) write_clouds(out / "data" / "test", data.test, kind_names(rc.train.dataset, data.test.size()));
  }
  const TrainResult r = train_loop(rc.network, rc.train, data, [&](const EpochRecord& e) {
    if (!quiet) std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " metric " << e.eval_metric << "\n";
  });
  save_checkpoint(r.checkpoint, out / "checkpoint.appt");
  write_file_atomic(out / "history.csv", history_csv(r.history));
  const auto& last = r.history.back();
  write_json(out / "train_summary.json",
             Json{{"param_count", count},
                  {"epochs_run", r.history.size()},
                  {"final_train_loss", last.train_loss},
                  {"final_eval_metric", last.eval_metric},
                  {"metric", rc.network.task == Task::classification ? "accuracy" : "miou"},
                  {"reached_target", r.reached_target},
                  {"config", to_json(rc)}});
  std::cout << "trained " << r.history.size() << " epochs, " << (rc.network.task == Task::classification ? "accuracy " : "mIoU ")
            << last.eval_metric << "\n";
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& data_paths,
             const std::string& split, const std::string& predictions) {
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  Checkpoint ck;
  try {
    ck = load_checkpoint(checkpoint);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  const NetworkConfig& net = ck.config;
  std::vector<PointCloud> clouds;
  if (!data_paths.empty()) {
    clouds = load_data(data_paths);
  } else if (!g.config.empty()) {
    RunConfig rc = run_config_from_json(read_json(g.config));
    if (g.seed) rc.train.seed = *g.seed;
    rc.network.seed = net.seed;
    if (to_json(rc.network) != to_json(net)) throw ConfigError("--config network does not match the checkpoint");
    Dataset d = make_dataset(net.task, rc.train.dataset, rc.train.seed);
    if (split == "train") clouds = std::move(d.train);
    else if (split == "test") clouds = d.test.empty() ? std::move(d.train) : std::move(d.test);
    else throw UsageError("--split must be 'train' or 'test'");
  } else {
    throw UsageError("eval needs --data or --config");
  }
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (clouds[i].feature_width() != net.input_width)
      throw ConfigError("cloud " + std::to_string(i) + " has " + std::to_string(clouds[i].feature_width()) +
                        " features, checkpoint expects " + std::to_string(net.input_width));
    try {
      check_targets(net, clouds[i]);
    } catch (const InputError& e) {
      throw InputError("cloud " + std::to_string(i) + ": missing labels or out-of-range targets: " + e.what());
    }
  }
  if (g.dry_run) {
    std::cout << "would evaluate " << clouds.size() << " clouds\n";
    return kOk;
  }
  const fs::path out(g.out);
  ensure_writable(out);
  const auto samples = prepare(net, clouds);
  const PooledPredictions pooled = pooled_predictions(net, ck.params, samples);
  const MetricsReport m = segmentation_metrics(pooled.pred, pooled.target, net.num_classes);
  Json j = metrics_json(m);
  j["samples"] = clouds.size();
  j["task"] = std::string(to_string(net.task));
  j["headline"] = headline_metric(net, m);
  write_json(out / "metrics.json", j);
  write_file_atomic(out / "metrics.csv", metrics_csv(m));
  if (!predictions.empty()) {
    std::string csv = "sample,point_index,prediction,target\n";
    std::size_t at = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
      const std::size_t rows = net.task == Task::segmentation ? clouds[s].size() : 1;
      for (std::size_t r = 0; r < rows; ++r, ++at)
        csv += std::to_string(s) + "," + (net.task == Task::segmentation ? std::to_string(r) : std::string()) + "," +
               std::to_string(pooled.pred[at]) + "," + std::to_string(pooled.target[at]) + "\n";
    }
    write_file_atomic(out / predictions, csv);
  }
  std::cout << "mIoU " << m.miou << " mAcc " << m.macc << " OA " << m.oa << "\n";
  return kOk;
}

int cmd_erf(const Globals& g, const std::string& checkpoint, const std::string& cloud_path, const std::string& fixture,
            long long point, double coverage) {
  if (checkpoint.empty()) throw UsageError("erf needs --checkpoint");
  Checkpoint ck;
  try {
    ck = load_checkpoint(checkpoint);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  if (ck.config.task != Task::segmentation) throw ConfigError("erf needs a segmentation checkpoint");
  std::optional<PointCloud> cloud;
  std::size_t cluster = 0;
  if (!fixture.empty()) {
    if (fixture != "two_clusters") throw UsageError("unknown fixture '" + fixture + "' (expected two_clusters)");
    cluster = 32;
    cloud = two_cluster_cloud(cluster, ck.config.input_width, g.seed.value_or(1));
  } else if (!cloud_path.empty()) {
    cloud = load_cloud(cloud_path);
  } else {
    throw UsageError("erf needs --cloud or --fixture");
  }
  if (cloud->feature_width() != ck.config.input_width) throw ConfigError("cloud feature width does not match the checkpoint");
  if (point < 0 || static_cast<std::size_t>(point) >= cloud->size())
    throw UsageError("--point " + std::to_string(point) + " outside [0, " + std::to_string(cloud->size()) + ")");
  if (!(coverage > 0.0 && coverage <= 1.0)) throw UsageError("--coverage must lie in (0, 1]");
  const fs::path out(g.out);
  if (g.dry_run) {
    std::cout << "would write ERF of point " << point << "\n";
    return kOk;
  }
  ensure_writable(out);
  const ErfMap map = erf_map(segmentation_model(ck.config, *cloud), ck.params, *cloud, static_cast<std::size_t>(point));
  std::size_t nonzero = 0;
  for (double v : map.mass) nonzero += v != 0.0;
  Json j{{"point_index", map.point_index},
         {"points", cloud->size()},
         {"total_mass", map.total},
         {"nonzero_points", nonzero},
         {"coverage", coverage}};
  j["radius"] = map.total > 0.0 ? Json(erf_radius(map, *cloud, coverage)) : Json(nullptr);
  if (cluster) {
    j["fixture"] = fixture;
    const bool first = map.point_index < cluster;
    j["far_cluster_mass"] = first ? erf_mass(map, cluster, 2 * cluster) : erf_mass(map, 0, cluster);
  }
  write_file_atomic(out / "erf.csv", erf_csv(map, *cloud));
  write_json(out / "erf.json", j);
  std::cout << "radius " << j["radius"].dump() << " nonzero " << nonzero << "\n";
  return kOk;
}

int cmd_flops(const Globals& g, const std::string& preset, const std::vector<long long>& ns) {
  NetworkConfig cfg;
  if (!g.config.empty()) cfg = network_config_file(g.config);
  else if (preset == "reference") cfg = reference_config(Task::segmentation, 6, 13);
  else if (preset.empty()) throw UsageError("flops needs --config or --preset reference");
  else throw UsageError("unknown preset '" + preset + "'");
  if (ns.empty()) throw UsageError("flops needs at least one --n");
  for (long long n : ns)
    if (n <= 0) throw UsageError("--n must be positive, got " + std::to_string(n));
  NetworkConfig half = cfg;
  for (auto& sr : half.schedule.sampling_ratio) sr /= 2.0;
  Json per_n = Json::array();
  bool linear = true;
  std::vector<std::pair<std::string, std::string>> files;
  for (long long n : ns) {
    const auto size = static_cast<std::size_t>(n);
    const FlopsReport r = count_flops(cfg, size);
    const std::uint64_t global = r.category(FlopsCategory::attention_global);
    const std::uint64_t global_half = count_flops(half, size).category(FlopsCategory::attention_global);
    Json entry = flops_json(r, size);
    entry["full_attention_total"] = count_flops(cfg, size, GlobalMode::full).total();
    if (global_half > 0) {
      const double ratio = static_cast<double>(global) / static_cast<double>(global_half);
      entry["global_ratio_doubled_pivots"] = ratio;
      linear = linear && std::abs(ratio - 2.0) <= 0.1;
    } else {
      entry["global_ratio_doubled_pivots"] = nullptr;
    }
    per_n.push_back(entry);
    files.emplace_back("flops_N" + std::to_string(n) + ".csv", flops_csv(r));
  }
  if (g.dry_run) {
    for (const auto& e : per_n) std::cout << "N " << e["points"] << " total " << e["total"] << "\n";
    return kOk;
  }
  const fs::path out(g.out);
  ensure_writable(out);
  for (const auto& [name, csv] : files) write_file_atomic(out / name, csv);
  write_json(out / "flops.json", Json{{"reports", per_n}, {"global_linear_in_pivots", linear}});
  for (const auto& e : per_n) std::cout << "N " << e["points"] << " total " << e["total"] << "\n";
  return kOk;
}

int cmd_selftest(bool full, const std::string& checkpoint) {
  bool ok = true;
  auto print = [&](const selftest::Check& c) {
    ok = ok && c.passed;
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.suite << ": " << c.name << " (" << c.detail << ")" << std::endl;
  };
  if (!checkpoint.empty()) print(selftest::checkpoint_fixture(checkpoint));
  selftest::run_all(full ? selftest::Level::full : selftest::Level::quick, print);
  std::cout << (ok ? "all checks passed" : "some checks failed") << "\n";
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point transformer toolkit: synthetic data, training, evaluation, ERF and FLOPs analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "appt 0.1.0");
  Globals g;
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "Seed override");
  app.add_flag("--dry-run", g.dry_run, "Validate and report without writing");

  auto* gen = app.add_subcommand("gen", "Write synthetic point clouds");
  std::string kind;
  long long gen_n = 256, gen_count = 1;
  gen->add_option("--kind", kind, "sphere, cube, torus or two_planes")->required();
  gen->add_option("--n", gen_n, "Points per cloud")->capture_default_str();
  gen->add_option("--count", gen_count, "Number of clouds")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train from a run configuration");
  bool export_data = false, quiet = false;
  train->add_flag("--export-data", export_data, "Also write the generated train/test clouds");
  train->add_flag("--quiet", quiet, "No per-epoch output");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint");
  std::string eval_ckpt, split = "test", predictions;
  std::vector<std::string> data;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data, "Cloud files or directories");
  eval->add_option("--split", split, "With --config: train or test")->capture_default_str();
  eval->add_option("--predictions", predictions, "Also write per-point predictions to this file name");

  auto* erf = app.add_subcommand("erf", "Effective receptive field of one point");
  std::string erf_ckpt, erf_cloud, fixture;
  long long point = 0;
  double coverage = 0.95;
  erf->add_option("--checkpoint", erf_ckpt, "Segmentation checkpoint")->required();
  erf->add_option("--cloud", erf_cloud, "Cloud file");
  erf->add_option("--fixture", fixture, "Built-in cloud: two_clusters");
  erf->add_option("--point", point, "Point of interest")->capture_default_str();
  erf->add_option("--coverage", coverage, "Mass fraction for the radius")->capture_default_str();

  auto* flops = app.add_subcommand("flops", "Analytic FLOPs per layer");
  std::string preset;
  std::vector<long long> ns;
  flops->add_option("--preset", preset, "reference");
  flops->add_option("--n", ns, "Point counts")->default_val(std::vector<long long>{4096});

  auto* self = app.add_subcommand("selftest", "Run the built-in oracle and property checks");
  bool full = false;
  std::string self_ckpt;
  self->add_flag("--full", full, "Use the full trial counts");
  self->add_option("--checkpoint", self_ckpt, "Also verify this checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen(g, kind, gen_n, gen_count);
    if (*train) return cmd_train(g, export_data, quiet);
    if (*eval) return cmd_eval(g, eval_ckpt, data, split, predictions);
    if (*erf) return cmd_erf(g, erf_ckpt, erf_cloud, fixture, point, coverage);
    if (*flops) return cmd_flops(g, preset, ns);
    if (*self) return cmd_selftest(full, self_ckpt);
  } catch (const TrainingError& e) {
    std::cerr << "error: training failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
