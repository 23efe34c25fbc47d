#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "appt/analysis.hpp"
#include "appt/checkpoint.hpp"
#include "appt/config_json.hpp"
#include "appt/network.hpp"
#include "appt/pointcloud.hpp"
#include "appt/random.hpp"

namespace appt {

struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate: must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum: must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay: must be >= 0");
  }
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  std::uint64_t steps = 0;

  static OptimizerState for_params(const ParamStore& params) {
    OptimizerState s;
    for (const auto& e : params.entries()) s.velocity.emplace_back(e.value.shape());
    return s;
  }
};

/// Weight decay only touches tensors named "*.weight".
inline bool decays(const std::string& name) {
  constexpr std::string_view suffix = ".weight";
  return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// g' = g + wd * theta;  v = mu * v + g';  theta -= lr * v;  grads zeroed.
inline void sgd_step(ParamStore& params, OptimizerState& state, const SgdConfig& cfg) {
  if (state.velocity.empty() && params.size()) state = OptimizerState::for_params(params);
  if (state.velocity.size() != params.size()) throw StateError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& e = params.entries()[i];
    Tensor& v = state.velocity[i];
    if (v.shape() != e.value.shape()) throw StateError("velocity shape mismatch for '" + e.name + "'");
    const double wd = decays(e.name) ? cfg.weight_decay : 0.0;
    auto th = e.value.data();
    auto g = e.grad.data();
    auto vel = v.data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      const double gj = g[j] + wd * th[j];
      vel[j] = cfg.momentum * vel[j] + gj;
      th[j] -= cfg.learning_rate * vel[j];
    }
  }
  params.zero_grad();
  ++state.steps;
}

// ---------------------------------------------------------------------------
// Data

struct DatasetSpec {
  std::vector<ShapeKind> kinds{ShapeKind::sphere, ShapeKind::cube, ShapeKind::torus};
  std::size_t points = 256;
  std::size_t train = 60;
  std::size_t test = 30;

  void validate(Task task) const {
    if (kinds.empty()) throw ConfigError("dataset.kinds: at least one kind required");
    if (points < 8) throw ConfigError("dataset.points: must be at least 8");
    if (train == 0) throw ConfigError("dataset.train: must be positive");
    if (task == Task::classification && kinds.size() < 2)
      throw ConfigError("dataset.kinds: classification needs at least 2 kinds");
    if (task == Task::segmentation)
      for (auto k : kinds)
        if (k != ShapeKind::two_planes)
          throw ConfigError("dataset.kinds: '" + std::string(kind_name(k)) + "' carries no per-point labels");
  }
};

struct TrainConfig {
  SgdConfig sgd;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  std::optional<double> target_metric;
  DatasetSpec dataset;

  void validate(Task task) const {
    sgd.validate();
    if (epochs == 0) throw ConfigError("epochs: must be at least 1");
    if (target_metric && !(*target_metric >= 0.0 && *target_metric <= 1.0))
      throw ConfigError("target_metric: must lie in [0, 1]");
    dataset.validate(task);
  }
};

struct Dataset {
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
};

/// Sample i of a split uses kind i mod K. Classification targets are the
/// kind's position in the list.
inline Dataset make_dataset(Task task, const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate(task);
  const CounterRng rng(seed, "dataset");
  auto split = [&](std::size_t count, std::uint64_t stream) {
    std::vector<PointCloud> out;
    out.reserve(count);
    const CounterRng r = rng.child(stream);
    for (std::size_t i = 0; i < count; ++i) {
      const ShapeKind kind = spec.kinds[i % spec.kinds.size()];
      PointCloud c = generate_synthetic(kind, spec.points, r.word(i));
      if (task == Task::classification)
        c = PointCloud(c.positions(), c.features(), {}, static_cast<int>(i % spec.kinds.size()));
      out.push_back(std::move(c));
    }
    return out;
  };
  return {split(spec.train, 1), split(spec.test, 2)};
}

// ---------------------------------------------------------------------------
// Loss and evaluation

struct PreparedSample {
  const PointCloud* cloud = nullptr;
  NetworkGeometry geometry;
};

inline std::vector<PreparedSample> prepare(const NetworkConfig& cfg, const std::vector<PointCloud>& clouds) {
  std::vector<PreparedSample> out;
  out.reserve(clouds.size());
  for (const auto& c : clouds) out.push_back({&c, network_geometry(cfg, c.positions())});
  return out;
}

inline void check_targets(const NetworkConfig& cfg, const PointCloud& c) {
  if (cfg.task == Task::segmentation) {
    if (!c.has_labels()) throw InputError("segmentation needs per-point labels; cloud has none");
  } else if (!c.cloud_class()) {
    throw InputError("classification needs a cloud class; cloud has none");
  }
  c.check_labels(static_cast<int>(cfg.num_classes));
}

template <class Store>
Var sample_loss(const NetworkConfig& cfg, Store& params, const PreparedSample& s, Tape& t) {
  check_targets(cfg, *s.cloud);
  Var logits = network_forward(cfg, params, s.geometry, t.input(s.cloud->features()));
  if (cfg.task == Task::segmentation) return cross_entropy(logits, s.cloud->labels());
  const int label = *s.cloud->cloud_class();
  return cross_entropy(logits, std::span<const int>(&label, 1));
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

inline std::vector<int> predict(const NetworkConfig& cfg, const ParamStore& params, const PreparedSample& s) {
  Tape t;
  return argmax_rows(network_forward(cfg, params, s.geometry, t.constant(s.cloud->features())).value());
}

/// Predictions and targets pooled over every sample: one entry per point for
/// segmentation, one per cloud for classification.
struct PooledPredictions {
  std::vector<int> pred;
  std::vector<int> target;
};

inline PooledPredictions pooled_predictions(const NetworkConfig& cfg, const ParamStore& params,
                                            const std::vector<PreparedSample>& samples) {
  PooledPredictions out;
  for (const auto& s : samples) {
    check_targets(cfg, *s.cloud);
    const std::vector<int> p = predict(cfg, params, s);
    out.pred.insert(out.pred.end(), p.begin(), p.end());
    if (cfg.task == Task::segmentation) {
      out.target.insert(out.target.end(), s.cloud->labels().begin(), s.cloud->labels().end());
    } else {
      out.target.push_back(*s.cloud->cloud_class());
    }
  }
  return out;
}

inline MetricsReport evaluate(const NetworkConfig& cfg, const ParamStore& params,
                              const std::vector<PreparedSample>& samples) {
  const PooledPredictions p = pooled_predictions(cfg, params, samples);
  return segmentation_metrics(p.pred, p.target, cfg.num_classes);
}

/// Accuracy for classification, mIoU for segmentation.
inline double headline_metric(const NetworkConfig& cfg, const MetricsReport& m) {
  return cfg.task == Task::classification ? m.oa : m.miou;
}

// ---------------------------------------------------------------------------
// Loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_metric = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
  bool reached_target = false;
};

/// Per-sample SGD. Parameters are initialized from trainCfg.seed, sample
/// order is reshuffled each epoch from the same seed. Held-out metric is
/// computed after every epoch (on the training split when the test split is
/// empty); the loop stops early once it reaches target_metric.
using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train_loop(NetworkConfig net, const TrainConfig& tc, const Dataset& data,
                              const EpochCallback& on_epoch = {}) {
  net.validate();
  tc.validate(net.task);
  net.seed = tc.seed;
  if (data.train.empty()) throw InputError("training split is empty");
  for (const auto& c : data.train) check_targets(net, c);
  for (const auto& c : data.test) check_targets(net, c);

  TrainResult res;
  res.checkpoint.config = net;
  ParamStore& params = res.checkpoint.params;
  params = init_network(net);
  OptimizerState opt = OptimizerState::for_params(params);

  const std::vector<PreparedSample> train = prepare(net, data.train);
  const std::vector<PreparedSample> held = data.test.empty() ? prepare(net, data.train) : prepare(net, data.test);
  const CounterRng order_rng(tc.seed, "order");
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const CounterRng er = order_rng.child(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[er.below(i, i)]);

    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      Tape t;
      Var loss = sample_loss(net, params, train[idx], t);
      const double l = loss.value()(0, 0);
      if (!std::isfinite(l)) throw TrainingError("loss became non-finite", epoch);
      loss_sum += l;
      t.backward(loss);
      sgd_step(params, opt, tc.sgd);
    }
    if (!params.all_finite()) throw TrainingError("parameters became non-finite", epoch);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()), headline_metric(net, evaluate(net, params, held))};
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (tc.target_metric && rec.eval_metric >= *tc.target_metric) {
      res.reached_target = true;
      break;
    }
  }
  return res;
}

inline TrainResult train_loop(const NetworkConfig& net, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  tc.validate(net.task);
  return train_loop(net, tc, make_dataset(net.task, tc.dataset, tc.seed), on_epoch);
}

/// `epoch,train_loss,eval_metric`
inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,eval_metric\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + detail::format_real(r.train_loss) + "," + detail::format_real(r.eval_metric) +
           "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration file
//
//   {"version": 1,
//    "network": {...},
//    "train": {"learning_rate", "momentum", "weight_decay", "epochs", "seed",
//              "target_metric", "dataset": {"kinds", "points", "train", "test"}}}

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
};

inline Json to_json(const TrainConfig& tc) {
  Json kinds = Json::array();
  for (auto k : tc.dataset.kinds) kinds.push_back(std::string(kind_name(k)));
  Json j{{"learning_rate", tc.sgd.learning_rate},
         {"momentum", tc.sgd.momentum},
         {"weight_decay", tc.sgd.weight_decay},
         {"epochs", tc.epochs},
         {"seed", tc.seed},
         {"dataset", {{"kinds", kinds}, {"points", tc.dataset.points}, {"train", tc.dataset.train}, {"test", tc.dataset.test}}}};
  if (tc.target_metric) j["target_metric"] = *tc.target_metric;
  return j;
}

inline TrainConfig train_from_json(const Json& j, Task task, const std::string& path = "train") {
  using namespace detail;
  if (!j.is_object()) field_error(path, "expected an object");
  TrainConfig tc;
  tc.sgd.learning_rate = real_field(j, "learning_rate", path, tc.sgd.learning_rate);
  tc.sgd.momentum = real_field(j, "momentum", path, tc.sgd.momentum);
  tc.sgd.weight_decay = real_field(j, "weight_decay", path, tc.sgd.weight_decay);
  tc.epochs = count_field(j, "epochs", path, tc.epochs);
  tc.seed = seed_field(j, "seed", path, tc.seed);
  if (const Json* v = optional_field(j, "target_metric")) {
    if (!v->is_number()) field_error(path + ".target_metric", "expected a number");
    tc.target_metric = v->get<double>();
  }
  if (task == Task::segmentation) tc.dataset.kinds = {ShapeKind::two_planes};
  if (const Json* d = optional_field(j, "dataset")) {
    const std::string dp = path + ".dataset";
    if (!d->is_object()) field_error(dp, "expected an object");
    if (const Json* k = optional_field(*d, "kinds")) {
      if (!k->is_array()) field_error(dp + ".kinds", "expected an array of kind names");
      tc.dataset.kinds.clear();
      for (std::size_t i = 0; i < k->size(); ++i) {
        const std::string f = dp + ".kinds[" + std::to_string(i) + "]";
        if (!(*k)[i].is_string()) field_error(f, "expected a string");
        try {
          tc.dataset.kinds.push_back(parse_kind((*k)[i].get<std::string>()));
        } catch (const InputError& e) {
          field_error(f, e.what());
        }
      }
    }
    tc.dataset.points = count_field(*d, "points", dp, tc.dataset.points);
    tc.dataset.train = count_field(*d, "train", dp, tc.dataset.train);
    tc.dataset.test = count_field(*d, "test", dp, tc.dataset.test);
  }
  try {
    tc.validate(task);
  } catch (const ConfigError& e) {
    throw ConfigError(path + "." + e.what());
  }
  return tc;
}

inline RunConfig run_config_from_json(const Json& j) {
  using namespace detail;
  if (!j.is_object()) field_error("config", "expected an object");
  if (const Json* v = optional_field(j, "version")) {
    if (!v->is_number_integer() || v->get<long long>() != kConfigVersion)
      field_error("version", "unsupported version (expected " + std::to_string(kConfigVersion) + ")");
  }
  const Json* n = optional_field(j, "network");
  if (!n) field_error("network", "required");
  RunConfig rc;
  rc.network = network_from_json(*n, "network");
  if (const Json* t = optional_field(j, "train")) {
    rc.train = train_from_json(*t, rc.network.task, "train");
  } else {
    rc.train = train_from_json(Json::object(), rc.network.task, "train");
  }
  return rc;
}

inline RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

/// Two-stage desk-scale setup: 3-class shape classification or two-plane
/// segmentation, lr 0.01, up to 200 epochs, early stop at 0.95 / 0.9.
inline RunConfig toy_run_config(Task task) {
  RunConfig rc;
  NetworkConfig& n = rc.network;
  n.task = task;
  n.schedule.depth = {1, 1};
  n.schedule.channels = {16, 32};
  n.schedule.global_ratio = {0.0, 0.5};
  n.schedule.sampling_ratio = {0.0, 0.25};
  n.schedule.stride = {1, 4};
  n.schedule.decoder_depth = {1, 1};
  n.input_width = 6;
  n.num_classes = task == Task::classification ? 3 : 2;
  n.neighbors = 16;
  TrainConfig& t = rc.train;
  t.sgd.learning_rate = 0.01;
  t.epochs = 200;
  t.seed = 1;
  if (task == Task::classification) {
    t.target_metric = 0.95;
  } else {
    t.target_metric = 0.9;
    t.dataset.kinds = {ShapeKind::two_planes};
    t.dataset.train = 20;
    t.dataset.test = 10;
  }
  n.seed = t.seed;
  return rc;
}

inline Json to_json(const RunConfig& rc) {
  return Json{{"version", kConfigVersion}, {"network", to_json(rc.network)}, {"train", to_json(rc.train)}};
}

}  // namespace appt
