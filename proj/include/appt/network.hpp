#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "appt/attention.hpp"
#include "appt/autodiff.hpp"
#include "appt/mlp.hpp"
#include "appt/pointcloud.hpp"

namespace appt {

enum class Arrangement { parallel, serial };
enum class Fusion { concat, sum_mlp };
enum class Task { segmentation, classification };

inline constexpr std::string_view to_string(Arrangement a) { return a == Arrangement::parallel ? "parallel" : "serial"; }
inline constexpr std::string_view to_string(Fusion f) { return f == Fusion::concat ? "concat" : "sum_mlp"; }
inline constexpr std::string_view to_string(Task t) {
  return t == Task::segmentation ? "segmentation" : "classification";
}

/// Number of global channels: round(CR_g * C).
inline std::size_t global_width(std::size_t channels, double global_ratio) {
  return static_cast<std::size_t>(std::lround(global_ratio * static_cast<double>(channels)));
}

struct BlockConfig {
  std::size_t channels = 0;
  double global_ratio = 0.0;
  double sampling_ratio = 0.0;
  std::size_t neighbors = 16;
  Arrangement arrangement = Arrangement::parallel;
  Fusion fusion = Fusion::concat;

  std::size_t global_channels() const { return global_width(channels, global_ratio); }
  std::size_t local_channels() const { return channels - global_channels(); }

  bool uses_local() const { return arrangement == Arrangement::serial || local_channels() > 0; }
  bool uses_global() const {
    return arrangement == Arrangement::serial ? global_ratio > 0.0 : global_channels() > 0;
  }

  void validate() const {
    if (channels == 0) throw ConfigError("block channels must be positive");
    if (!(global_ratio >= 0.0 && global_ratio <= 1.0)) throw ConfigError("channel ratio outside [0, 1]");
    if (!(sampling_ratio >= 0.0 && sampling_ratio <= 1.0)) throw ConfigError("sampling ratio outside [0, 1]");
    if (global_ratio > 0.0 && sampling_ratio == 0.0) {
      throw ConfigError("a positive channel ratio needs a positive sampling ratio");
    }
    if (neighbors == 0) throw ConfigError("neighbor count must be positive");
  }
};

// ---------------------------------------------------------------------------
// Channel split and fusion

inline std::pair<Tensor, Tensor> channel_split(const Tensor& x, double global_ratio) {
  if (!(global_ratio >= 0.0 && global_ratio <= 1.0)) throw RangeError("channel ratio outside [0, 1]");
  const std::size_t c = x.cols(), cg = global_width(c, global_ratio), cl = c - cg;
  Tensor xl = Tensor::matrix(x.rows(), cl), xg = Tensor::matrix(x.rows(), cg);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::copy_n(x.row(r).begin(), cl, xl.row(r).begin());
    std::copy_n(x.row(r).begin() + cl, cg, xg.row(r).begin());
  }
  return {std::move(xl), std::move(xg)};
}

inline std::vector<MlpSpec> fusion_specs(const std::string& prefix, std::size_t cl, std::size_t cg, std::size_t c) {
  std::vector<MlpSpec> out;
  if (cl) out.push_back(linear_spec(prefix + ".fuse_l", cl, c));
  if (cg) out.push_back(linear_spec(prefix + ".fuse_g", cg, c));
  return out;
}

/// Joins the branch outputs. Either branch may be absent (zero width).
template <class Store>
Var fuse(std::optional<Var> y_l, std::optional<Var> y_g, Fusion strategy, std::size_t channels,
         const std::string& prefix, Store& params) {
  if (!y_l && !y_g) throw ConfigError("fusion needs at least one branch");
  if (strategy == Fusion::concat) {
    const std::size_t width = (y_l ? y_l->cols() : 0) + (y_g ? y_g->cols() : 0);
    if (width != channels) {
      throw DimensionError("concat of widths " + std::to_string(y_l ? y_l->cols() : 0) + " + " +
                           std::to_string(y_g ? y_g->cols() : 0) + " does not give " + std::to_string(channels));
    }
    if (y_l && y_g) return concat_cols(*y_l, *y_g);
    return y_l ? *y_l : *y_g;
  }
  auto specs = fusion_specs(prefix, y_l ? y_l->cols() : 0, y_g ? y_g->cols() : 0, channels);
  std::optional<Var> out;
  std::size_t s = 0;
  if (y_l) out = mlp(specs[s++], params, *y_l);
  if (y_g) {
    Var g = mlp(specs[s], params, *y_g);
    out = out ? add(*out, g) : g;
  }
  return *out;
}

/// Tensor-level fusion; `params` is only read for sum_mlp.
inline Tensor fuse(const Tensor& y_l, const Tensor& y_g, Fusion strategy, std::size_t channels,
                   const ParamStore& params = {}, const std::string& prefix = "") {
  Tape t;
  std::optional<Var> l, g;
  if (y_l.cols()) l = t.constant(y_l);
  if (y_g.cols()) g = t.constant(y_g);
  return fuse(l, g, strategy, channels, prefix, params).value();
}

// ---------------------------------------------------------------------------
// Block

inline AttentionParams local_attention(const std::string& prefix, std::size_t c) { return {prefix + ".lga", c}; }
inline AttentionParams global_attention(const std::string& prefix, std::size_t c) { return {prefix + ".gpa", c}; }

inline MlpSpec ffn_spec(const std::string& prefix, std::size_t c) {
  return MlpSpec{prefix + ".ffn", {c, c, c}, Activation::relu, {true, false}, false};
}

inline std::vector<MlpSpec> block_specs(const BlockConfig& cfg, const std::string& prefix) {
  cfg.validate();
  std::vector<MlpSpec> out;
  auto append = [&](const std::vector<MlpSpec>& s) { out.insert(out.end(), s.begin(), s.end()); };
  const std::size_t c = cfg.channels;
  if (cfg.arrangement == Arrangement::serial) {
    append(local_attention(prefix, c).local_specs());
    if (cfg.uses_global()) append(global_attention(prefix, c).scalar_specs());
  } else {
    const std::size_t cl = cfg.local_channels(), cg = cfg.global_channels();
    if (cl) append(local_attention(prefix, cl).local_specs());
    if (cg) append(global_attention(prefix, cg).scalar_specs());
    if (cfg.fusion == Fusion::sum_mlp) append(fusion_specs(prefix, cl, cg, c));
  }
  out.push_back(ffn_spec(prefix, c));
  return out;
}

/// Geometry a block needs at its resolution.
struct BlockGeometry {
  const Tensor* positions = nullptr;
  NeighborIndex neighbors;
  PivotSet pivots;
};

inline BlockGeometry block_geometry(const Tensor& positions, std::size_t k, double sampling_ratio) {
  BlockGeometry g;
  g.positions = &positions;
  g.neighbors = knn(positions, std::min(k, positions.rows()));
  g.pivots = farthest_point_sample(positions, sampling_ratio);
  return g;
}

/// One APPT block.
///
/// parallel: split -> (LGA on local, GPA on global) -> fuse -> Y' = x + fused,
///           Y = Y' + FFN(Y')
/// serial:   h = x + LGA(x), h' = h + GPA(h), Y = h' + FFN(h')
template <class Store>
Var appt_block(const BlockConfig& cfg, const std::string& prefix, Store& params, Var x, const BlockGeometry& geo) {
  cfg.validate();
  if (x.cols() != cfg.channels) {
    throw DimensionError("block '" + prefix + "' expects " + std::to_string(cfg.channels) + " channels, got " +
                         shape_string(x.shape()));
  }
  if (cfg.uses_global() && geo.pivots.size() == 0) {
    throw ConfigError("block '" + prefix + "' has a global branch but no pivots");
  }
  const std::size_t c = cfg.channels;
  auto pivots_of = [&](Var v) { return gather_rows(v, geo.pivots.indices); };

  Var mixed = x;
  if (cfg.arrangement == Arrangement::serial) {
    mixed = add(x, lga(local_attention(prefix, c), params, x, *geo.positions, geo.neighbors));
    if (cfg.uses_global()) mixed = add(mixed, gpa(global_attention(prefix, c), params, mixed, pivots_of(mixed)));
  } else {
    const std::size_t cl = cfg.local_channels(), cg = cfg.global_channels();
    std::optional<Var> y_l, y_g;
    if (cl) {
      Var x_l = cg ? slice_cols(x, 0, cl) : x;
      y_l = lga(local_attention(prefix, cl), params, x_l, *geo.positions, geo.neighbors);
    }
    if (cg) {
      Var x_g = cl ? slice_cols(x, cl, cg) : x;
      y_g = gpa(global_attention(prefix, cg), params, x_g, pivots_of(x_g));
    }
    mixed = add(x, fuse(y_l, y_g, cfg.fusion, c, prefix, params));
  }
  return add(mixed, mlp(ffn_spec(prefix, c), params, mixed));
}

inline Tensor appt_block_forward(const Tensor& x, const PointCloud& cloud, const BlockConfig& cfg,
                                 const ParamStore& params, const std::string& prefix) {
  const BlockGeometry geo = block_geometry(cloud.positions(), cfg.neighbors, cfg.sampling_ratio);
  Tape t;
  return appt_block(cfg, prefix, params, t.constant(x), geo).value();
}

/// Zeroes every block's output projections (value maps, position-encoding
/// output layers, fusion maps, FFN output layers), turning each block into
/// the identity.
inline void zero_block_outputs(ParamStore& params) {
  static const std::vector<std::string> suffixes = {".alpha.0.", ".theta.1.", ".fuse_l.0.", ".fuse_g.0.", ".ffn.1."};
  for (auto& e : params.entries())
    for (const auto& s : suffixes)
      if (e.name.find(s) != std::string::npos) e.value.fill(0.0);
}

// ---------------------------------------------------------------------------
// Transitions

struct DownGeometry {
  Tensor positions;        // sampled points, FPS order
  IndexList sampled;       // their rows in the finer cloud
  NeighborIndex pool;      // k nearest finer points around each sampled point
};

inline std::size_t downsampled_count(std::size_t n, std::size_t stride) { return (n + stride - 1) / stride; }

inline DownGeometry down_geometry(const Tensor& fine, std::size_t stride, std::size_t k) {
  if (stride < 2) throw ConfigError("downsample stride must be at least 2");
  DownGeometry g;
  g.sampled = farthest_point_order(fine, downsampled_count(fine.rows(), stride));
  g.positions = Tensor::matrix(g.sampled.size(), 3);
  for (std::size_t r = 0; r < g.sampled.size(); ++r)
    std::copy_n(fine.row(g.sampled[r]).begin(), 3, g.positions.row(r).begin());
  g.pool = knn_query(g.positions, fine, k);
  return g;
}

inline MlpSpec down_spec(const std::string& prefix, std::size_t c_in, std::size_t c_out) {
  return MlpSpec{prefix + ".down", {c_in, c_out}, Activation::relu, {true}, true};
}

/// Linear C -> C' (normalized, ReLU) then max over each sampled point's
/// pooling neighborhood.
template <class Store>
Var transition_down(const DownGeometry& geo, const MlpSpec& spec, Store& params, Var x) {
  Var h = mlp(spec, params, x);
  return group_max(gather_rows(h, geo.pool.table), geo.pool.k);
}

struct TransitionDownResult {
  Tensor positions;
  Tensor features;
};

inline TransitionDownResult transition_down(const PointCloud& cloud, const Tensor& x, std::size_t stride,
                                            std::size_t k, const ParamStore& params, const MlpSpec& spec) {
  if (k > cloud.size()) throw RangeError("k = " + std::to_string(k) + " exceeds " + std::to_string(cloud.size()));
  DownGeometry geo = down_geometry(cloud.positions(), stride, k);
  Tape t;
  Tensor f = transition_down(geo, spec, params, t.constant(x)).value();
  return {std::move(geo.positions), std::move(f)};
}

struct UpGeometry {
  IndexList sources;
  std::vector<double> weights;
  std::size_t per = 0;
};

inline constexpr double kCoincidence = 1e-12;

/// Inverse squared-distance weights over the 3 nearest coarse points (fewer
/// if the coarse cloud is smaller). A fine point within 1e-12 of a coarse
/// point copies that point alone.
inline UpGeometry up_geometry(const Tensor& coarse, const Tensor& fine) {
  const std::size_t per = std::min<std::size_t>(3, coarse.rows());
  NeighborIndex nn = knn_query(fine, coarse, per);
  UpGeometry g;
  g.per = per;
  g.sources = nn.table;
  g.weights.resize(nn.table.size());
  for (std::size_t i = 0; i < fine.rows(); ++i) {
    double* w = g.weights.data() + i * per;
    const std::size_t* src = g.sources.data() + i * per;
    const double d0 = detail::dist2(fine, i, coarse, src[0]);
    if (d0 < kCoincidence * kCoincidence) {
      w[0] = 1.0;
      for (std::size_t s = 1; s < per; ++s) w[s] = 0.0;
      continue;
    }
    double total = 0.0;
    for (std::size_t s = 0; s < per; ++s) {
      w[s] = 1.0 / detail::dist2(fine, i, coarse, src[s]);
      total += w[s];
    }
    for (std::size_t s = 0; s < per; ++s) w[s] /= total;
  }
  return g;
}

inline MlpSpec up_spec(const std::string& prefix, std::size_t c_coarse, std::size_t c_fine) {
  return linear_spec(prefix + ".up", c_coarse, c_fine);
}

/// Interpolate coarse features onto the fine cloud, project, add the skip.
template <class Store>
Var transition_up(const UpGeometry& geo, const MlpSpec& spec, Store& params, Var x_coarse, Var x_skip) {
  Var interp = weighted_gather(x_coarse, geo.sources, geo.weights, geo.per);
  Var proj = mlp(spec, params, interp);
  if (proj.cols() != x_skip.cols()) {
    throw DimensionError("skip width " + std::to_string(x_skip.cols()) + " does not match projection width " +
                         std::to_string(proj.cols()));
  }
  return add(proj, x_skip);
}

inline Tensor transition_up(const Tensor& coarse_positions, const Tensor& fine_positions, const Tensor& x_coarse,
                            const Tensor& x_skip, const ParamStore& params, const MlpSpec& spec) {
  const UpGeometry geo = up_geometry(coarse_positions, fine_positions);
  Tape t;
  return transition_up(geo, spec, params, t.constant(x_coarse), t.constant(x_skip)).value();
}

// ---------------------------------------------------------------------------
// Networks

struct StageSchedule {
  std::vector<std::size_t> depth;
  std::vector<std::size_t> channels;
  std::vector<double> global_ratio;
  std::vector<double> sampling_ratio;
  std::vector<std::size_t> stride;  // downsampling into each stage; entry 0 unused
  std::vector<std::size_t> decoder_depth;

  std::size_t stages() const { return depth.size(); }

  void validate() const {
    const std::size_t s = depth.size();
    if (s == 0) throw ConfigError("stages: at least one stage is required");
    auto same = [&](std::size_t n, const char* field) {
      if (n != s) {
        throw ConfigError(std::string("stages.") + field + ": expected " + std::to_string(s) + " entries, got " +
                          std::to_string(n));
      }
    };
    same(channels.size(), "channels");
    same(global_ratio.size(), "global_ratio");
    same(sampling_ratio.size(), "sampling_ratio");
    same(stride.size(), "stride");
    same(decoder_depth.size(), "decoder_depth");
    for (std::size_t i = 0; i < s; ++i) {
      if (channels[i] == 0) throw ConfigError("stages.channels: widths must be positive");
      if (i && channels[i] <= channels[i - 1]) throw ConfigError("stages.channels: must be strictly increasing");
      if (i && stride[i] < 2) throw ConfigError("stages.stride: entries after the first must be >= 2");
      if (!(global_ratio[i] >= 0.0 && global_ratio[i] <= 1.0))
        throw ConfigError("stages.global_ratio: entries must lie in [0, 1]");
      if (!(sampling_ratio[i] >= 0.0 && sampling_ratio[i] <= 1.0))
        throw ConfigError("stages.sampling_ratio: entries must lie in [0, 1]");
      if (global_ratio[i] > 0.0 && sampling_ratio[i] == 0.0)
        throw ConfigError("stages.sampling_ratio: stage " + std::to_string(i) +
                          " has a positive channel ratio but no pivots");
    }
  }
};

struct NetworkConfig {
  Task task = Task::segmentation;
  StageSchedule schedule;
  std::size_t input_width = 6;
  std::size_t num_classes = 2;
  std::size_t neighbors = 16;
  Arrangement arrangement = Arrangement::parallel;
  Fusion fusion = Fusion::concat;
  std::uint64_t seed = 0;

  void validate() const {
    schedule.validate();
    if (num_classes < 2) throw ConfigError("num_classes: must be at least 2");
    if (input_width == 0) throw ConfigError("input_width: must be positive");
    if (neighbors == 0) throw ConfigError("neighbors: must be positive");
  }

  BlockConfig block(std::size_t stage) const {
    return {schedule.channels[stage], schedule.global_ratio[stage], schedule.sampling_ratio[stage], neighbors,
            arrangement, fusion};
  }
};

/// Five-stage schedule: depths [2,3,4,6,3], widths [32,64,128,256,512],
/// sampling ratios [0,1/64,1/16,1/4,1], global channel ratios
/// [0,1/8,1/8,1/4,1], one decoder block per stage, stride 4.
inline StageSchedule reference_schedule() {
  StageSchedule s;
  s.depth = {2, 3, 4, 6, 3};
  s.channels = {32, 64, 128, 256, 512};
  s.sampling_ratio = {0.0, 1.0 / 64, 1.0 / 16, 1.0 / 4, 1.0};
  s.global_ratio = {0.0, 1.0 / 8, 1.0 / 8, 1.0 / 4, 1.0};
  s.stride = {1, 4, 4, 4, 4};
  s.decoder_depth = {1, 1, 1, 1, 1};
  return s;
}

inline NetworkConfig reference_config(Task task, std::size_t input_width, std::size_t num_classes) {
  NetworkConfig cfg;
  cfg.task = task;
  cfg.schedule = reference_schedule();
  cfg.input_width = input_width;
  cfg.num_classes = num_classes;
  cfg.neighbors = 16;
  return cfg;
}

namespace names {
inline std::string enc_block(std::size_t s, std::size_t b) {
  return "enc" + std::to_string(s) + ".block" + std::to_string(b);
}
inline std::string dec_block(std::size_t s, std::size_t b) {
  return "dec" + std::to_string(s) + ".block" + std::to_string(b);
}
inline std::string enc(std::size_t s) { return "enc" + std::to_string(s); }
inline std::string dec(std::size_t s) { return "dec" + std::to_string(s); }
}  // namespace names

inline MlpSpec embed_spec(const NetworkConfig& cfg) {
  return MlpSpec{"embed", {cfg.input_width, cfg.schedule.channels[0]}, Activation::relu, {true}, true};
}

inline MlpSpec decoder_transform_spec(const NetworkConfig& cfg) {
  const std::size_t c = cfg.schedule.channels.back();
  return MlpSpec{names::dec(cfg.schedule.stages() - 1) + ".transform", {c, c}, Activation::relu, {true}, true};
}

inline MlpSpec head_spec(const NetworkConfig& cfg) {
  const std::size_t c = cfg.task == Task::segmentation ? cfg.schedule.channels.front() : cfg.schedule.channels.back();
  return MlpSpec{"head", {c, c, cfg.num_classes}, Activation::relu, {true, false}, false};
}

/// Every MLP of the network in declaration order.
inline std::vector<MlpSpec> network_specs(const NetworkConfig& cfg) {
  cfg.validate();
  const auto& sch = cfg.schedule;
  const std::size_t stages = sch.stages();
  std::vector<MlpSpec> out{embed_spec(cfg)};
  auto append = [&](std::vector<MlpSpec> s) { out.insert(out.end(), s.begin(), s.end()); };
  for (std::size_t s = 0; s < stages; ++s) {
    if (s) out.push_back(down_spec(names::enc(s), sch.channels[s - 1], sch.channels[s]));
    for (std::size_t b = 0; b < sch.depth[s]; ++b) append(block_specs(cfg.block(s), names::enc_block(s, b)));
  }
  if (cfg.task == Task::segmentation) {
    out.push_back(decoder_transform_spec(cfg));
    for (std::size_t s = stages; s-- > 0;) {
      if (s + 1 < stages) out.push_back(up_spec(names::dec(s), sch.channels[s + 1], sch.channels[s]));
      for (std::size_t b = 0; b < sch.decoder_depth[s]; ++b)
        append(block_specs(cfg.block(s), names::dec_block(s, b)));
    }
  }
  out.push_back(head_spec(cfg));
  return out;
}

inline std::size_t param_count(const NetworkConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : network_specs(cfg)) n += s.param_count();
  return n;
}

inline ParamStore init_network(const NetworkConfig& cfg) {
  const auto specs = network_specs(cfg);
  return init_params(specs, cfg.seed);
}

/// Throws ConfigError unless `params` holds exactly the tensors of `cfg`.
inline void check_network_params(const NetworkConfig& cfg, const ParamStore& params) {
  const auto specs = network_specs(cfg);
  std::size_t expected = 0;
  try {
    for (const auto& s : specs) {
      check_params(s, params);
      expected += s.layers() * 2;
      for (std::size_t l = 0; l < s.layers(); ++l) expected += s.normalized(l) ? 2 : 0;
    }
  } catch (const LookupError& e) {
    throw ConfigError(std::string("parameters do not match the network configuration: ") + e.what());
  }
  if (expected != params.size()) {
    throw ConfigError("parameter store holds " + std::to_string(params.size()) + " tensors, configuration needs " +
                      std::to_string(expected));
  }
}

/// Zeroes the classifier's final layer so every class gets the same logit.
inline void zero_head(ParamStore& params) {
  for (auto& e : params.entries())
    if (e.name.rfind("head.1.", 0) == 0) e.value.fill(0.0);
}

/// All resolution-dependent lookups for one input cloud.
struct NetworkGeometry {
  std::vector<Tensor> positions;       // per stage
  std::vector<BlockGeometry> blocks;   // per stage
  std::vector<DownGeometry> down;      // down[s] builds stage s from s - 1 (entry 0 empty)
  std::vector<UpGeometry> up;          // up[s] interpolates stage s + 1 onto stage s
};

inline NetworkGeometry network_geometry(const NetworkConfig& cfg, const Tensor& positions) {
  const auto& sch = cfg.schedule;
  const std::size_t stages = sch.stages();
  NetworkGeometry g;
  g.positions.reserve(stages);
  g.down.resize(stages);
  g.positions.push_back(positions);
  for (std::size_t s = 1; s < stages; ++s) {
    const Tensor& fine = g.positions.back();
    g.down[s] = down_geometry(fine, sch.stride[s], std::min(cfg.neighbors, fine.rows()));
    g.positions.push_back(g.down[s].positions);
  }
  g.blocks.reserve(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    const BlockConfig bc = cfg.block(s);
    const bool needs_pivots = bc.uses_global();
    g.blocks.push_back(block_geometry(g.positions[s], cfg.neighbors, needs_pivots ? bc.sampling_ratio : 0.0));
  }
  if (cfg.task == Task::segmentation) {
    g.up.resize(stages);
    for (std::size_t s = 0; s + 1 < stages; ++s) g.up[s] = up_geometry(g.positions[s + 1], g.positions[s]);
  }
  return g;
}

namespace detail {

template <class Store>
std::vector<Var> run_encoder(const NetworkConfig& cfg, Store& params, const NetworkGeometry& geo, Var features) {
  const auto& sch = cfg.schedule;
  std::vector<Var> skips;
  Var h = mlp(embed_spec(cfg), params, features);
  for (std::size_t s = 0; s < sch.stages(); ++s) {
    if (s) h = transition_down(geo.down[s], down_spec(names::enc(s), sch.channels[s - 1], sch.channels[s]), params, h);
    for (std::size_t b = 0; b < sch.depth[s]; ++b)
      h = appt_block(cfg.block(s), names::enc_block(s, b), params, h, geo.blocks[s]);
    skips.push_back(h);
  }
  return skips;
}

inline void check_input(const NetworkConfig& cfg, const NetworkGeometry& geo, Var features) {
  if (features.cols() != cfg.input_width) {
    throw ConfigError("input features have width " + std::to_string(features.cols()) + ", network expects " +
                      std::to_string(cfg.input_width));
  }
  if (features.rows() != geo.positions.front().rows()) throw DimensionError("feature rows do not match the cloud");
}

}  // namespace detail

/// Per-point logits, one row per input point in input order.
template <class Store>
Var segmentation_forward(const NetworkConfig& cfg, Store& params, const NetworkGeometry& geo, Var features) {
  if (cfg.task != Task::segmentation) throw ConfigError("configuration is not a segmentation network");
  detail::check_input(cfg, geo, features);
  const auto& sch = cfg.schedule;
  const std::size_t stages = sch.stages();
  std::vector<Var> skips = detail::run_encoder(cfg, params, geo, features);
  Var h = mlp(decoder_transform_spec(cfg), params, skips.back());
  for (std::size_t s = stages; s-- > 0;) {
    if (s + 1 < stages)
      h = transition_up(geo.up[s], up_spec(names::dec(s), sch.channels[s + 1], sch.channels[s]), params, h, skips[s]);
    for (std::size_t b = 0; b < sch.decoder_depth[s]; ++b)
      h = appt_block(cfg.block(s), names::dec_block(s, b), params, h, geo.blocks[s]);
  }
  return mlp(head_spec(cfg), params, h);
}

/// 1 x num_classes logits from the globally averaged final-stage features.
template <class Store>
Var classification_forward(const NetworkConfig& cfg, Store& params, const NetworkGeometry& geo, Var features) {
  if (cfg.task != Task::classification) throw ConfigError("configuration is not a classification network");
  detail::check_input(cfg, geo, features);
  std::vector<Var> skips = detail::run_encoder(cfg, params, geo, features);
  return mlp(head_spec(cfg), params, mean_rows(skips.back()));
}

template <class Store>
Var network_forward(const NetworkConfig& cfg, Store& params, const NetworkGeometry& geo, Var features) {
  return cfg.task == Task::segmentation ? segmentation_forward(cfg, params, geo, features)
                                        : classification_forward(cfg, params, geo, features);
}

inline Tensor segmentation_forward(const NetworkConfig& cfg, const ParamStore& params, const PointCloud& cloud) {
  check_network_params(cfg, params);
  const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
  Tape t;
  return segmentation_forward(cfg, params, geo, t.constant(cloud.features())).value();
}

inline Tensor classification_forward(const NetworkConfig& cfg, const ParamStore& params, const PointCloud& cloud) {
  check_network_params(cfg, params);
  const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
  Tape t;
  return classification_forward(cfg, params, geo, t.constant(cloud.features())).value();
}

}  // namespace appt
