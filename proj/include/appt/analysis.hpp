#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "appt/config_json.hpp"
#include "appt/network.hpp"
#include "appt/pointcloud.hpp"

namespace appt {

// ---------------------------------------------------------------------------
// FLOPs accounting
//
// Conventions:
//   multiply-add                     2
//   linear, n rows, in -> out        2 * n * in * out (bias not counted)
//   normalization                    4 per element
//   ReLU, add, sub, Hadamard, max    1 per element
//   softmax                          5 per element (scaling folded in)
//   scalar attention core, N x M     2*N*M*C (logits) + 2*N*M*C (mixing) + 5*N*M
//
// The attention_global category holds only pivot-dependent work (key/value
// projections and the attention core), so it is linear in M. The query
// projection of the global branch is booked under mlp.

enum class FlopsCategory { attention_local, attention_global, mlp, transition };

inline constexpr std::string_view to_string(FlopsCategory c) {
  switch (c) {
    case FlopsCategory::attention_local: return "attention_local";
    case FlopsCategory::attention_global: return "attention_global";
    case FlopsCategory::mlp: return "mlp";
    case FlopsCategory::transition: return "transition";
  }
  return "?";
}

struct FlopsRecord {
  std::string layer;
  std::string kind;
  FlopsCategory category;
  std::uint64_t flops;
};

struct FlopsReport {
  std::vector<FlopsRecord> records;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : records) t += r.flops;
    return t;
  }

  std::uint64_t category(FlopsCategory c) const {
    std::uint64_t t = 0;
    for (const auto& r : records)
      if (r.category == c) t += r.flops;
    return t;
  }
};

/// Global branch evaluation used by count_flops: pivots as configured, or
/// full N x N attention at every stage that has a global branch.
enum class GlobalMode { pivots, full };

inline std::uint64_t linear_flops(std::uint64_t n, std::uint64_t in, std::uint64_t out) { return 2 * n * in * out; }

inline std::uint64_t mlp_flops(const MlpSpec& spec, std::uint64_t n) {
  std::uint64_t f = 0;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::uint64_t out = spec.widths[l + 1];
    f += linear_flops(n, spec.widths[l], out);
    if (spec.normalized(l)) f += 4 * n * out;
    const bool last = l + 1 == spec.layers();
    if (spec.activation == Activation::relu && (!last || spec.activate_last)) f += n * out;
  }
  return f;
}

inline std::uint64_t scalar_attention_core_flops(std::uint64_t n, std::uint64_t m, std::uint64_t c) {
  return 2 * n * m * c + 2 * n * m * c + 5 * n * m;
}

namespace detail {

class FlopsLedger {
 public:
  void add(std::string layer, std::string kind, FlopsCategory cat, std::uint64_t f) {
    report.records.push_back({std::move(layer), std::move(kind), cat, f});
  }

  void mlp(const MlpSpec& spec, std::uint64_t n, FlopsCategory cat, std::string kind = "mlp") {
    add(spec.name, std::move(kind), cat, mlp_flops(spec, n));
  }

  void lga(const std::string& prefix, std::size_t c, std::uint64_t n, std::uint64_t k) {
    const AttentionParams ap = local_attention(prefix, c);
    const auto cat = FlopsCategory::attention_local;
    mlp(ap.query(), n, cat, "linear");
    mlp(ap.key(), n, cat, "linear");
    mlp(ap.value(), n, cat, "linear");
    mlp(ap.position(), n * k, cat);
    mlp(ap.weight(), n * k, cat);
    // q - k + d (2), softmax (5), v + d (1), Hadamard (1), neighbor sum (1)
    add(ap.prefix + ".core", "vector_attention", cat, 10 * n * k * c);
  }

  void gpa(const std::string& prefix, std::size_t c, std::uint64_t n, std::uint64_t m) {
    const AttentionParams ap = global_attention(prefix, c);
    mlp(ap.query(), n, FlopsCategory::mlp, "linear");
    mlp(ap.key(), m, FlopsCategory::attention_global, "linear");
    mlp(ap.value(), m, FlopsCategory::attention_global, "linear");
    add(ap.prefix + ".core", "scalar_attention", FlopsCategory::attention_global, scalar_attention_core_flops(n, m, c));
  }

  void block(const BlockConfig& cfg, const std::string& prefix, std::uint64_t n, std::uint64_t k, std::uint64_t m) {
    const std::size_t c = cfg.channels;
    if (cfg.arrangement == Arrangement::serial) {
      lga(prefix, c, n, k);
      add(prefix + ".residual_local", "add", FlopsCategory::mlp, n * c);
      if (cfg.uses_global()) {
        gpa(prefix, c, n, m);
        add(prefix + ".residual_global", "add", FlopsCategory::mlp, n * c);
      }
    } else {
      const std::size_t cl = cfg.local_channels(), cg = cfg.global_channels();
      if (cl) lga(prefix, cl, n, k);
      if (cg) gpa(prefix, cg, n, m);
      if (cfg.fusion == Fusion::sum_mlp) {
        for (const auto& s : fusion_specs(prefix, cl, cg, c)) mlp(s, n, FlopsCategory::mlp, "linear");
        if (cl && cg) add(prefix + ".fuse_sum", "add", FlopsCategory::mlp, n * c);
      }
      add(prefix + ".residual", "add", FlopsCategory::mlp, n * c);
    }
    mlp(ffn_spec(prefix, c), n, FlopsCategory::mlp, "ffn");
    add(prefix + ".ffn_residual", "add", FlopsCategory::mlp, n * c);
  }

  FlopsReport report;
};

}  // namespace detail

/// Analytic FLOPs of one forward pass over an N-point cloud.
inline FlopsReport count_flops(const NetworkConfig& cfg, std::size_t n_points, GlobalMode mode = GlobalMode::pivots) {
  if (n_points == 0) throw RangeError("point count must be positive");
  cfg.validate();
  const auto& sch = cfg.schedule;
  const std::size_t stages = sch.stages();
  std::vector<std::uint64_t> n(stages);
  n[0] = n_points;
  for (std::size_t s = 1; s < stages; ++s) n[s] = downsampled_count(n[s - 1], sch.stride[s]);

  auto k_at = [&](std::size_t s) { return std::min<std::uint64_t>(cfg.neighbors, n[s]); };
  auto m_at = [&](std::size_t s) -> std::uint64_t {
    if (!cfg.block(s).uses_global()) return 0;
    return mode == GlobalMode::full ? n[s] : pivot_count(sch.sampling_ratio[s], n[s]);
  };

  detail::FlopsLedger led;
  led.mlp(embed_spec(cfg), n[0], FlopsCategory::mlp, "embed");
  for (std::size_t s = 0; s < stages; ++s) {
    if (s) {
      const MlpSpec down = down_spec(names::enc(s), sch.channels[s - 1], sch.channels[s]);
      led.mlp(down, n[s - 1], FlopsCategory::transition, "down_linear");
      const std::uint64_t pool_k = std::min<std::uint64_t>(cfg.neighbors, n[s - 1]);
      led.add(names::enc(s) + ".pool", "max_pool", FlopsCategory::transition, n[s] * pool_k * sch.channels[s]);
    }
    for (std::size_t b = 0; b < sch.depth[s]; ++b) led.block(cfg.block(s), names::enc_block(s, b), n[s], k_at(s), m_at(s));
  }
  if (cfg.task == Task::segmentation) {
    led.mlp(decoder_transform_spec(cfg), n[stages - 1], FlopsCategory::mlp, "transform");
    for (std::size_t s = stages; s-- > 0;) {
      if (s + 1 < stages) {
        const std::uint64_t per = std::min<std::uint64_t>(3, n[s + 1]);
        led.add(names::dec(s) + ".interpolate", "interpolate", FlopsCategory::transition,
                2 * n[s] * per * sch.channels[s + 1]);
        led.mlp(up_spec(names::dec(s), sch.channels[s + 1], sch.channels[s]), n[s], FlopsCategory::transition,
                "up_linear");
        led.add(names::dec(s) + ".skip", "add", FlopsCategory::transition, n[s] * sch.channels[s]);
      }
      for (std::size_t b = 0; b < sch.decoder_depth[s]; ++b)
        led.block(cfg.block(s), names::dec_block(s, b), n[s], k_at(s), m_at(s));
    }
    led.mlp(head_spec(cfg), n[0], FlopsCategory::mlp, "head");
  } else {
    led.add("pool", "average_pool", FlopsCategory::mlp, n[stages - 1] * sch.channels.back());
    led.mlp(head_spec(cfg), 1, FlopsCategory::mlp, "head");
  }
  return std::move(led.report);
}

/// `layer,kind,flops`, one row per layer, totals row last.
inline std::string flops_csv(const FlopsReport& r) {
  std::string out = "layer,kind,flops\n";
  for (const auto& rec : r.records) out += rec.layer + "," + rec.kind + "," + std::to_string(rec.flops) + "\n";
  out += "total,total," + std::to_string(r.total()) + "\n";
  return out;
}

inline Json flops_json(const FlopsReport& r, std::size_t n_points) {
  Json cats = Json::object();
  for (auto c : {FlopsCategory::attention_local, FlopsCategory::attention_global, FlopsCategory::mlp,
                 FlopsCategory::transition})
    cats[std::string(to_string(c))] = r.category(c);
  return Json{{"points", n_points}, {"total", r.total()}, {"categories", cats}, {"layers", r.records.size()}};
}

// ---------------------------------------------------------------------------
// Effective receptive field

/// Two unit-cube clusters of `per_cluster` points each, the second shifted
/// by `gap` along x. Point indices [0, per_cluster) form the first cluster.
inline PointCloud two_cluster_cloud(std::size_t per_cluster, std::size_t channels, std::uint64_t seed,
                                    double gap = 10.0) {
  if (per_cluster == 0 || channels == 0) throw RangeError("two-cluster fixture needs points and channels");
  const std::size_t n = 2 * per_cluster;
  const CounterRng pos_rng(seed, "cluster-positions"), feat_rng(seed, "cluster-features");
  Tensor pos = Tensor::matrix(n, 3), feat = Tensor::matrix(n, channels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) pos(i, d) = pos_rng.uniform(i * 3 + d, 0.0, 1.0);
    if (i >= per_cluster) pos(i, 0) += gap;
    for (std::size_t c = 0; c < channels; ++c) feat(i, c) = feat_rng.uniform(i * channels + c, -1.0, 1.0);
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i < per_cluster ? 0 : 1;
  return PointCloud(std::move(pos), std::move(feat), std::move(labels));
}

/// Maps input features to per-point outputs for a fixed cloud.
struct ErfModel {
  std::function<Var(const ParamStore&, Var)> forward;
};

inline ErfModel block_model(const BlockConfig& cfg, std::string prefix, const PointCloud& cloud) {
  auto geo = std::make_shared<BlockGeometry>(block_geometry(cloud.positions(), cfg.neighbors, cfg.sampling_ratio));
  auto positions = std::make_shared<Tensor>(cloud.positions());
  geo->positions = positions.get();
  return {[cfg, prefix = std::move(prefix), geo, positions](const ParamStore& p, Var x) {
    return appt_block(cfg, prefix, p, x, *geo);
  }};
}

/// Stack of blocks sharing one geometry; prefixes "<prefix><i>".
inline ErfModel block_stack_model(const BlockConfig& cfg, std::string prefix, std::size_t count, const PointCloud& cloud) {
  auto geo = std::make_shared<BlockGeometry>(block_geometry(cloud.positions(), cfg.neighbors, cfg.sampling_ratio));
  auto positions = std::make_shared<Tensor>(cloud.positions());
  geo->positions = positions.get();
  return {[cfg, prefix = std::move(prefix), count, geo, positions](const ParamStore& p, Var x) {
    for (std::size_t i = 0; i < count; ++i) x = appt_block(cfg, prefix + std::to_string(i), p, x, *geo);
    return x;
  }};
}

inline ErfModel segmentation_model(const NetworkConfig& cfg, const PointCloud& cloud) {
  auto geo = std::make_shared<NetworkGeometry>(network_geometry(cfg, cloud.positions()));
  return {[cfg, geo](const ParamStore& p, Var x) { return segmentation_forward(cfg, p, *geo, x); }};
}

struct ErfMap {
  std::size_t point_index = 0;
  std::vector<double> mass;
  double total = 0.0;
};

/// Seeds a unit gradient on every output channel of `point_index` and
/// records the L2 norm of each input point's feature gradient.
inline ErfMap erf_map(const ErfModel& model, const ParamStore& params, const PointCloud& cloud, std::size_t point_index) {
  if (point_index >= cloud.size()) {
    throw RangeError("point index " + std::to_string(point_index) + " outside [0, " + std::to_string(cloud.size()) + ")");
  }
  Tape t;
  Var in = t.input(cloud.features());
  Var out = model.forward(params, in);
  if (out.rows() != cloud.size()) throw DimensionError("ERF model must return one row per input point");
  Tensor seed(out.shape());
  for (std::size_t j = 0; j < out.cols(); ++j) seed(point_index, j) = 1.0;
  t.backward(out, seed);
  const Tensor g = t.grad(in);
  ErfMap map;
  map.point_index = point_index;
  map.mass.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    double s = 0.0;
    for (double v : g.row(i)) s += v * v;
    map.mass[i] = std::sqrt(s);
    map.total += map.mass[i];
  }
  return map;
}

/// Smallest radius around the point of interest enclosing at least
/// `coverage` of the total mass.
inline double erf_radius(const ErfMap& map, const PointCloud& cloud, double coverage) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw RangeError("coverage must lie in (0, 1]");
  if (map.mass.size() != cloud.size()) throw DimensionError("ERF map does not match cloud");
  if (!(map.total > 0.0)) throw NumericError("ERF radius undefined for zero total mass");
  const Tensor& p = cloud.positions();
  std::vector<std::pair<double, double>> by_dist;  // (distance, mass)
  by_dist.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    by_dist.emplace_back(std::sqrt(detail::dist2(p, i, p, map.point_index)), map.mass[i]);
  std::sort(by_dist.begin(), by_dist.end());
  const double target = coverage * map.total * (1.0 - 1e-12);
  double acc = 0.0;
  for (const auto& [d, m] : by_dist) {
    acc += m;
    if (acc >= target) return d;
  }
  return by_dist.back().first;
}

/// Sum of mass over point indices [begin, end).
inline double erf_mass(const ErfMap& map, std::size_t begin, std::size_t end) {
  if (begin > end || end > map.mass.size()) throw RangeError("mass range outside the map");
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += map.mass[i];
  return s;
}

inline std::string erf_csv(const ErfMap& map, const PointCloud& cloud) {
  std::string out = "point_index,x,y,z,mass\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out += std::to_string(i);
    for (std::size_t d = 0; d < 3; ++d) out += "," + detail::format_real(cloud.positions()(i, d));
    out += "," + detail::format_real(map.mass[i]) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation grid

enum class Ramp { up, flat, down };

inline constexpr std::string_view to_string(Ramp r) {
  return r == Ramp::up ? "up" : r == Ramp::flat ? "flat" : "down";
}

struct AblationCase {
  std::string name;
  NetworkConfig config;
};

/// {parallel, serial} x {concat, sum_mlp} x channel-ratio direction x
/// sampling-ratio direction over a three-stage miniature schedule
/// (widths 8/16/24, CR 1/4..3/4, SR 1/8..1/2).
inline std::vector<AblationCase> ablation_grid(Task task, std::size_t input_width = 4, std::size_t num_classes = 3) {
  auto ramp = [](Ramp r, std::vector<double> up) {
    if (r == Ramp::flat) return std::vector<double>(up.size(), up[up.size() / 2]);
    if (r == Ramp::down) std::reverse(up.begin(), up.end());
    return up;
  };
  std::vector<AblationCase> out;
  for (Arrangement arr : {Arrangement::parallel, Arrangement::serial})
    for (Fusion fus : {Fusion::concat, Fusion::sum_mlp})
      for (Ramp cr : {Ramp::up, Ramp::flat, Ramp::down})
        for (Ramp sr : {Ramp::up, Ramp::flat, Ramp::down}) {
          NetworkConfig cfg;
          cfg.task = task;
          cfg.input_width = input_width;
          cfg.num_classes = num_classes;
          cfg.neighbors = 4;
          cfg.arrangement = arr;
          cfg.fusion = fus;
          auto& s = cfg.schedule;
          s.depth = {1, 1, 1};
          s.channels = {8, 16, 24};
          s.stride = {1, 2, 2};
          s.decoder_depth = {1, 1, 1};
          s.global_ratio = ramp(cr, {0.25, 0.5, 0.75});
          s.sampling_ratio = ramp(sr, {0.125, 0.25, 0.5});
          cfg.validate();
          out.push_back({std::string(to_string(arr)) + "/" + std::string(to_string(fus)) + "/cr_" +
                             std::string(to_string(cr)) + "/sr_" + std::string(to_string(sr)),
                         std::move(cfg)});
        }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Exact non-negative rational, kept reduced. Arithmetic that would overflow
/// returns nullopt.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction of(std::int64_t n, std::int64_t d) {
    const std::int64_t g = std::gcd(n, d);
    return g ? Fraction{n / g, d / g} : Fraction{0, 1};
  }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(Fraction a, Fraction b) { return a.num == b.num && a.den == b.den; }
};

inline std::optional<Fraction> operator+(std::optional<Fraction> a, Fraction b) {
  if (!a) return std::nullopt;
  std::int64_t x, y, d;
  if (__builtin_mul_overflow(a->num, b.den, &x) || __builtin_mul_overflow(b.num, a->den, &y) ||
      __builtin_add_overflow(x, y, &x) || __builtin_mul_overflow(a->den, b.den, &d))
    return std::nullopt;
  return Fraction::of(x, d);
}

inline std::optional<Fraction> operator/(std::optional<Fraction> a, std::int64_t k) {
  std::int64_t d;
  if (!a || k == 0 || __builtin_mul_overflow(a->den, k, &d)) return std::nullopt;
  return Fraction::of(a->num, d);
}

struct MetricsReport {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> confusion;      // row = label, column = prediction
  std::vector<std::optional<double>> iou;    // nullopt: class absent from both
  std::vector<std::optional<double>> recall; // nullopt: class absent from labels
  double miou = 0.0;
  double macc = 0.0;
  double oa = 0.0;
  std::optional<Fraction> miou_exact;
  std::optional<Fraction> macc_exact;
  Fraction oa_exact;

  std::uint64_t at(std::size_t label, std::size_t pred) const { return confusion[label * num_classes + pred]; }
};

inline MetricsReport segmentation_metrics(std::span<const int> pred, std::span<const int> labels, std::size_t num_classes) {
  if (pred.size() != labels.size()) {
    throw InputError("prediction count " + std::to_string(pred.size()) + " does not match label count " +
                     std::to_string(labels.size()));
  }
  if (pred.empty()) throw InputError("no predictions to score");
  if (num_classes == 0) throw InputError("class count must be positive");
  MetricsReport r;
  r.num_classes = num_classes;
  r.confusion.assign(num_classes * num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(pred[i]) >= num_classes ||
        static_cast<std::size_t>(labels[i]) >= num_classes)
      throw InputError("class id outside [0, " + std::to_string(num_classes) + ") at position " + std::to_string(i));
    ++r.confusion[static_cast<std::size_t>(labels[i]) * num_classes + static_cast<std::size_t>(pred[i])];
  }
  const auto total = static_cast<std::int64_t>(pred.size());
  std::int64_t trace = 0;
  std::optional<Fraction> iou_sum = Fraction{}, acc_sum = Fraction{};
  double iou_real = 0.0, acc_real = 0.0;
  std::int64_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::int64_t tp = static_cast<std::int64_t>(r.at(c, c)), row = 0, col = 0;
    for (std::size_t o = 0; o < num_classes; ++o) {
      row += static_cast<std::int64_t>(r.at(c, o));
      col += static_cast<std::int64_t>(r.at(o, c));
    }
    trace += tp;
    const std::int64_t uni = row + col - tp;  // TP + FN + FP
    if (uni > 0) {
      r.iou.push_back(static_cast<double>(tp) / static_cast<double>(uni));
      iou_sum = iou_sum + Fraction::of(tp, uni);
      iou_real += *r.iou.back();
      ++iou_n;
    } else {
      r.iou.push_back(std::nullopt);
    }
    if (row > 0) {
      r.recall.push_back(static_cast<double>(tp) / static_cast<double>(row));
      acc_sum = acc_sum + Fraction::of(tp, row);
      acc_real += *r.recall.back();
      ++acc_n;
    } else {
      r.recall.push_back(std::nullopt);
    }
  }
  r.miou_exact = iou_sum / iou_n;
  r.macc_exact = acc_sum / acc_n;
  r.oa_exact = Fraction::of(trace, total);
  r.miou = r.miou_exact ? r.miou_exact->value() : iou_real / static_cast<double>(iou_n);
  r.macc = r.macc_exact ? r.macc_exact->value() : acc_real / static_cast<double>(acc_n);
  r.oa = r.oa_exact.value();
  return r;
}

inline Json metrics_json(const MetricsReport& r) {
  Json iou = Json::array(), rec = Json::array();
  for (const auto& v : r.iou) iou.push_back(v ? Json(*v) : Json(nullptr));
  for (const auto& v : r.recall) rec.push_back(v ? Json(*v) : Json(nullptr));
  return Json{{"miou", r.miou}, {"macc", r.macc}, {"oa", r.oa}, {"num_classes", r.num_classes},
              {"iou", iou},     {"recall", rec},  {"confusion", r.confusion}};
}

/// `class,iou,recall`, empty cells for excluded classes.
inline std::string metrics_csv(const MetricsReport& r) {
  std::string out = "class,iou,recall\n";
  for (std::size_t c = 0; c < r.num_classes; ++c) {
    out += std::to_string(c) + ",";
    if (r.iou[c]) out += detail::format_real(*r.iou[c]);
    out += ",";
    if (r.recall[c]) out += detail::format_real(*r.recall[c]);
    out += "\n";
  }
  return out;
}

}  // namespace appt
