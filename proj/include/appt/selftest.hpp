#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "appt/analysis.hpp"
#include "appt/checkpoint.hpp"
#include "appt/gradcheck.hpp"
#include "appt/training.hpp"

namespace appt::selftest {

struct Check {
  int id = 0;
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

enum class Level { quick, full };

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline Tensor uniform_matrix(std::size_t rows, std::size_t cols, const CounterRng& rng, double lo, double hi) {
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(i, lo, hi);
  return t;
}

inline PointCloud random_cloud(std::size_t n, std::size_t channels, std::uint64_t seed, double extent = 1.0) {
  const CounterRng rng(seed, "selftest-cloud");
  return PointCloud(uniform_matrix(n, 3, rng.child(1), 0.0, extent), uniform_matrix(n, channels, rng.child(2), -1.0, 1.0));
}

inline ParamStore perturbed(std::span<const MlpSpec> specs, std::uint64_t seed) {
  ParamStore p = init_params(specs, seed);
  const CounterRng rng(seed, "selftest-perturb");
  std::uint64_t c = 0;
  for (auto& e : p.entries())
    if (e.name.find("weight") == std::string::npos)
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += rng.uniform(c++, -0.3, 0.3);
  return p;
}

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  const CounterRng rng(seed, "selftest-permutation");
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i, i)]);
  return p;
}

// Reference implementations written directly from the selection rules.

inline bool lex(const Tensor& p, std::size_t a, std::size_t b) {
  for (std::size_t d = 0; d < 3; ++d)
    if (p(a, d) != p(b, d)) return p(a, d) < p(b, d);
  return a < b;
}

inline double d2(const Tensor& p, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t d = 0; d < 3; ++d) s += (p(a, d) - p(b, d)) * (p(a, d) - p(b, d));
  return s;
}

inline std::vector<std::size_t> fps_reference(const Tensor& p, std::size_t m) {
  const std::size_t n = p.rows();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return lex(p, a, b); });
  double c[3] = {0, 0, 0};
  for (std::size_t i : order)
    for (std::size_t d = 0; d < 3; ++d) c[d] += p(i, d);
  for (double& v : c) v /= static_cast<double>(n);
  std::vector<std::size_t> sel;
  if (m == 0) return sel;
  std::size_t best = order[0];
  double bd = -1.0;
  for (std::size_t i : order) {
    double s = 0.0;
    for (std::size_t d = 0; d < 3; ++d) s += (p(i, d) - c[d]) * (p(i, d) - c[d]);
    if (s > bd) bd = s, best = i;
  }
  sel.push_back(best);
  while (sel.size() < m) {
    std::size_t arg = n;
    double far = -1.0;
    for (std::size_t i : order) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double md = std::numeric_limits<double>::infinity();
      for (std::size_t s : sel) md = std::min(md, d2(p, i, s));
      if (md > far) far = md, arg = i;
    }
    sel.push_back(arg);
  }
  return sel;
}

inline std::vector<std::size_t> knn_reference(const Tensor& p, std::size_t i, std::size_t k) {
  std::vector<std::size_t> all(p.rows());
  for (std::size_t j = 0; j < p.rows(); ++j) all[j] = j;
  std::stable_sort(all.begin(), all.end(), [&](auto a, auto b) {
    if ((a == i) != (b == i)) return a == i;
    const double da = d2(p, i, a), db = d2(p, i, b);
    if (da != db) return da < db;
    return lex(p, a, b);
  });
  all.resize(k);
  return all;
}

inline Tensor attention_reference(const Tensor& x, const ParamStore& p, const AttentionParams& ap) {
  const Tensor q = mlp_forward(ap.query(), p, x), k = mlp_forward(ap.key(), p, x), v = mlp_forward(ap.value(), p, x);
  const std::size_t n = x.rows(), c = ap.channels;
  Tensor y = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> w(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < c; ++d) s += q(i, d) * k(j, d);
      w[j] = s / std::sqrt(static_cast<double>(c));
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (double& l : w) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t d = 0; d < c; ++d) y(i, d) += w[j] / z * v(j, d);
  }
  return y;
}

inline NetworkConfig mini_segmentation() {
  NetworkConfig cfg;
  cfg.task = Task::segmentation;
  cfg.schedule.depth = {1, 1};
  cfg.schedule.channels = {8, 16};
  cfg.schedule.global_ratio = {0.0, 0.5};
  cfg.schedule.sampling_ratio = {0.0, 0.5};
  cfg.schedule.stride = {1, 2};
  cfg.schedule.decoder_depth = {1, 1};
  cfg.input_width = 4;
  cfg.num_classes = 3;
  cfg.neighbors = 4;
  return cfg;
}

inline NetworkConfig single_stage(std::size_t channels, double cr, double sr) {
  NetworkConfig cfg;
  cfg.task = Task::classification;
  cfg.schedule = {{1}, {channels}, {cr}, {sr}, {1}, {1}};
  cfg.input_width = 3;
  return cfg;
}

inline Check run(int id, std::string suite, std::string name, const std::function<void(Check&)>& body) {
  Check c{id, std::move(suite), std::move(name)};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.passed = false;
    c.detail = std::string("exception: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace detail

inline Check gpa_equals_full_attention(std::size_t instances) {
  return detail::run(1, "attention", "pivot attention with SR=1 equals full attention", [&](Check& c) {
    double worst = 0.0;
    for (std::size_t t = 0; t < instances; ++t) {
      const CounterRng rng(t, "criterion-1");
      const std::size_t n = 1 + rng.below(0, 128), ch = 1 + rng.below(1, 32);
      const AttentionParams ap{"g", ch};
      const ParamStore p = detail::perturbed(ap.scalar_specs(), t);
      const PointCloud cloud = detail::random_cloud(n, ch, t);
      const PivotSet piv = farthest_point_sample(cloud, 1.0);
      const Tensor y = gpa_forward(cloud.features(), gather_pivots(cloud.features(), piv), p, ap);
      worst = std::max({worst, max_abs_diff(y, full_scalar_attention(cloud.features(), p, ap)),
                        max_abs_diff(y, detail::attention_reference(cloud.features(), p, ap))});
    }
    c.passed = worst < 1e-10;
    c.detail = "max|diff| " + detail::sci(worst) + " over " + std::to_string(instances) + " instances";
  });
}

inline Check fps_matches_reference(std::size_t clouds) {
  return detail::run(2, "pointcloud", "farthest point sampling equals O(N^2) greedy reference", [&](Check& c) {
    std::size_t bad = 0;
    const double ratios[] = {1.0 / 64, 1.0 / 16, 0.25, 0.5, 1.0};
    for (std::size_t t = 0; t < clouds; ++t) {
      const CounterRng rng(t, "criterion-2");
      const std::size_t n = 1 + rng.below(0, 64);
      const double sr = ratios[rng.below(1, 5)];
      const PointCloud cloud = detail::random_cloud(n, 1, 1000 + t);
      if (farthest_point_sample(cloud, sr).indices != detail::fps_reference(cloud.positions(), pivot_count(sr, n)))
        ++bad;
    }
    c.passed = bad == 0;
    c.detail = std::to_string(clouds - bad) + "/" + std::to_string(clouds) + " clouds identical";
  });
}

inline Check knn_matches_reference(std::size_t clouds) {
  return detail::run(3, "pointcloud", "kNN equals full-sort reference", [&](Check& c) {
    std::size_t bad = 0;
    for (std::size_t t = 0; t < clouds; ++t) {
      const CounterRng rng(t, "criterion-3");
      const std::size_t n = 1 + rng.below(0, 128), k = 1 + rng.below(1, std::min<std::size_t>(n, 16));
      const PointCloud cloud = detail::random_cloud(n, 1, 2000 + t);
      const NeighborIndex nbr = knn(cloud, k);
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = nbr.row(i);
        if (!std::equal(row.begin(), row.end(), detail::knn_reference(cloud.positions(), i, k).begin())) {
          ++bad;
          break;
        }
      }
    }
    c.passed = bad == 0;
    c.detail = std::to_string(clouds - bad) + "/" + std::to_string(clouds) + " clouds identical";
  });
}

inline Check gradients_match_finite_differences(std::size_t seeds) {
  return detail::run(4, "numerics", "backward equals central differences (block and 2-stage network)", [&](Check& c) {
    double worst_block = 0.0, worst_net = 0.0;
    std::size_t checked = 0, skipped = 0;
    std::string where;
    const BlockConfig bc{8, 0.5, 0.25, 6, Arrangement::parallel, Fusion::concat};
    const NetworkConfig nc = detail::mini_segmentation();
    for (std::uint64_t s = 0; s < seeds; ++s) {
      const PointCloud bcloud = detail::random_cloud(24, 8, 3000 + s);
      const BlockGeometry bgeo = block_geometry(bcloud.positions(), bc.neighbors, bc.sampling_ratio);
      const auto bspecs = block_specs(bc, "b");
      auto block = [&](ParamStore& p, Tape& t) { return appt_block(bc, "b", p, t.constant(bcloud.features()), bgeo); };
      const auto rb = gradient_check(block, detail::perturbed(bspecs, s), s);
      if (rb.worst > worst_block) worst_block = rb.worst, where = rb.worst_entry;

      const PointCloud ncloud = detail::random_cloud(16, nc.input_width, 4000 + s);
      const NetworkGeometry ngeo = network_geometry(nc, ncloud.positions());
      const auto nspecs = network_specs(nc);
      auto net = [&](ParamStore& p, Tape& t) { return segmentation_forward(nc, p, ngeo, t.constant(ncloud.features())); };
      const auto rn = gradient_check(net, detail::perturbed(nspecs, s), s);
      if (rn.worst > worst_net) worst_net = rn.worst, where = rn.worst_entry;
      checked += rb.checked + rn.checked;
      skipped += rb.skipped + rn.skipped;
    }
    c.passed = worst_block < 1e-4 && worst_net < 1e-4 && skipped == 0;
    c.detail = "worst rel err block " + detail::sci(worst_block) + ", network " + detail::sci(worst_net) + "; " +
               std::to_string(checked) + " entries over " + std::to_string(seeds) + " seeds, " +
               std::to_string(skipped) + " unresolved";
    if (!c.passed) c.detail += "; worst at " + where;
  });
}

inline Check permutation_equivariance(std::size_t trials, std::size_t points) {
  return detail::run(5, "network", "segmentation forward is permutation equivariant", [&](Check& c) {
    NetworkConfig cfg = reference_config(Task::segmentation, 6, 13);
    const ParamStore p = detail::perturbed(network_specs(cfg), 5);
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
      const PointCloud cloud = detail::random_cloud(points, 6, 5000 + t);
      const auto order = detail::permutation(points, t);
      const Tensor base = segmentation_forward(cfg, p, cloud);
      const Tensor moved = segmentation_forward(cfg, p, cloud.permuted(order));
      for (std::size_t r = 0; r < points; ++r)
        for (std::size_t k = 0; k < base.cols(); ++k) worst = std::max(worst, std::abs(moved(r, k) - base(order[r], k)));
    }
    c.passed = worst < 1e-9;
    c.detail = "max|diff| " + detail::sci(worst) + " over " + std::to_string(trials) + " trials, reference schedule, N=" +
               std::to_string(points);
  });
}

inline Check erf_enlargement(std::size_t seeds) {
  return detail::run(6, "analysis", "pivot attention enlarges the effective receptive field", [&](Check& c) {
    const BlockConfig local{16, 0.0, 0.0, 16, Arrangement::parallel, Fusion::concat};
    const BlockConfig appt{16, 0.5, 0.25, 16, Arrangement::parallel, Fusion::concat};
    bool ok = true;
    double min_far = std::numeric_limits<double>::infinity(), max_local_far = 0.0, min_gap = min_far;
    for (std::uint64_t s = 1; s <= seeds; ++s) {
      const PointCloud cloud = two_cluster_cloud(32, 16, s);
      const NeighborIndex nbr = knn(cloud, 16);
      for (std::size_t i = 0; i < cloud.size(); ++i)
        for (std::size_t j : nbr.row(i)) ok = ok && ((i < 32) == (j < 32));
      const ErfMap ml = erf_map(block_model(local, "b", cloud), init_params(block_specs(local, "b"), s), cloud, 0);
      const ErfMap ma = erf_map(block_model(appt, "b", cloud), init_params(block_specs(appt, "b"), s), cloud, 0);
      min_far = std::min(min_far, erf_mass(ma, 32, 64));
      max_local_far = std::max(max_local_far, erf_mass(ml, 32, 64));
      min_gap = std::min(min_gap, erf_radius(ma, cloud, 0.95) - erf_radius(ml, cloud, 0.95));
    }
    c.passed = ok && max_local_far == 0.0 && min_far > 1e-8 && min_gap > 0.0;
    c.detail = "far-cluster mass LGA-only " + detail::sci(max_local_far) + ", APPT min " + detail::sci(min_far) +
               "; min radius gain " + detail::sci(min_gap) + " over " + std::to_string(seeds) + " fixtures" +
               (ok ? "" : "; kNN leaked across clusters");
  });
}

inline Check complexity_claim() {
  return detail::run(7, "analysis", "global attention FLOPs linear in M; pivots beat full attention", [&](Check& c) {
    const auto lo = count_flops(detail::single_stage(64, 0.5, 1.0 / 16), 1024);
    const auto hi = count_flops(detail::single_stage(64, 0.5, 1.0 / 8), 1024);
    const double ratio = static_cast<double>(hi.category(FlopsCategory::attention_global)) /
                         static_cast<double>(lo.category(FlopsCategory::attention_global));
    const NetworkConfig reference = reference_config(Task::segmentation, 6, 13);
    bool below = true;
    std::string totals;
    for (std::size_t n : {1024u, 4096u, 16384u}) {
      const auto piv = count_flops(reference, n).total(), full = count_flops(reference, n, GlobalMode::full).total();
      below = below && piv < full;
      if (n == 4096) totals = detail::sci(static_cast<double>(piv)) + " vs " + detail::sci(static_cast<double>(full));
    }
    c.passed = ratio >= 1.9 && ratio <= 2.1 && below;
    c.detail = "FLOPs(2M)/FLOPs(M) " + detail::sci(ratio) + "; reference total at N=4096 " + totals + " (pivots vs full)";
  });
}

inline Check param_count_anchor() {
  return detail::run(8, "network", "reference segmentation parameter count", [&](Check& c) {
    const std::size_t n = param_count(reference_config(Task::segmentation, 6, 13));
    c.passed = n >= 7'000'000 && n <= 10'000'000;
    c.detail = std::to_string(n) + " parameters (window [7.0e6, 1.0e7])";
  });
}

inline Check toy_learning(bool include_classification) {
  return detail::run(9, "training", "toy tasks reach their targets", [&](Check& c) {
    c.passed = true;
    std::vector<Task> tasks{Task::segmentation};
    if (include_classification) tasks.insert(tasks.begin(), Task::classification);
    for (Task task : tasks) {
      const RunConfig rc = toy_run_config(task);
      const auto t0 = std::chrono::steady_clock::now();
      const TrainResult a = train_loop(rc.network, rc.train);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const TrainResult b = train_loop(rc.network, rc.train);
      const bool same = serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint) &&
                        history_csv(a.history) == history_csv(b.history);
      const bool ok = a.reached_target && a.history.size() <= 200 && secs < 600.0 && same;
      c.passed = c.passed && ok;
      if (!c.detail.empty()) c.detail += "; ";
      c.detail += std::string(to_string(task)) + " " + (task == Task::classification ? "accuracy " : "mIoU ") +
                  detail::sci(a.history.back().eval_metric) + " at epoch " + std::to_string(a.history.size()) + " in " +
                  detail::sci(secs) + " s" + (same ? ", rerun identical" : ", RERUN DIFFERS");
    }
    if (!include_classification) c.detail += " (classification run only at full level)";
  });
}

inline Check metric_oracle() {
  return detail::run(10, "analysis", "metric oracle 7/12, 3/4, 3/4", [&](Check& c) {
    const std::vector<int> labels{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const MetricsReport r = segmentation_metrics(pred, labels, 2);
    c.passed = r.miou_exact && *r.miou_exact == Fraction::of(7, 12) && r.oa_exact == Fraction::of(3, 4) &&
               r.macc_exact && *r.macc_exact == Fraction::of(3, 4);
    c.detail = "mIoU " + (r.miou_exact ? std::to_string(r.miou_exact->num) + "/" + std::to_string(r.miou_exact->den)
                                      : std::string("inexact")) +
               ", OA " + std::to_string(r.oa_exact.num) + "/" + std::to_string(r.oa_exact.den) + ", mAcc " +
               detail::sci(r.macc);
  });
}

inline Check residual_identity() {
  return detail::run(11, "network", "zeroed projections give identity blocks and ln k loss", [&](Check& c) {
    std::size_t blocks = 0, exact = 0;
    for (Arrangement arr : {Arrangement::parallel, Arrangement::serial})
      for (Fusion fus : {Fusion::concat, Fusion::sum_mlp})
        for (double cr : {0.0, 0.25, 0.5, 1.0}) {
          const BlockConfig bc{16, cr, cr > 0 ? 0.25 : 0.0, 8, arr, fus};
          const PointCloud cloud = detail::random_cloud(40, 16, 6000 + blocks);
          ParamStore p = detail::perturbed(block_specs(bc, "b"), blocks);
          zero_block_outputs(p);
          ++blocks;
          if (appt_block_forward(cloud.features(), cloud, bc, p, "b") == cloud.features()) ++exact;
        }
    double worst = 0.0;
    for (Task task : {Task::classification, Task::segmentation}) {
      const RunConfig rc = toy_run_config(task);
      DatasetSpec spec = rc.train.dataset;
      spec.points = 64;
      spec.train = task == Task::classification ? 6 : 2;
      const Dataset data = make_dataset(task, spec, 11);
      ParamStore p = init_network(rc.network);
      zero_block_outputs(p);
      zero_head(p);
      double sum = 0.0;
      for (const auto& s : prepare(rc.network, data.train)) {
        Tape t;
        sum += sample_loss(rc.network, p, s, t).value()(0, 0);
      }
      const double mean = sum / static_cast<double>(data.train.size());
      worst = std::max(worst, std::abs(mean - std::log(static_cast<double>(rc.network.num_classes))));
    }
    c.passed = exact == blocks && worst < 1e-9;
    c.detail = std::to_string(exact) + "/" + std::to_string(blocks) + " blocks exactly identity; |loss - ln k| " +
               detail::sci(worst);
  });
}

inline Check ablation_grid_smoke() {
  return detail::run(12, "network", "ablation grid instantiates, trains a step, passes spot checks", [&](Check& c) {
    const auto grid = ablation_grid(Task::segmentation);
    const PointCloud cloud = detail::random_cloud(32, 4, 12);
    std::vector<int> labels(cloud.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    std::size_t ok = 0;
    double worst = 0.0;
    std::string failed;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const auto& [name, cfg] = grid[g];
      const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
      ParamStore p = detail::perturbed(network_specs(cfg), g);
      bool good = true;
      {
        Tape t;
        Var loss = cross_entropy(segmentation_forward(cfg, p, geo, t.constant(cloud.features())), labels);
        t.backward(loss);
        good = std::isfinite(loss.value()(0, 0));
        for (const auto& e : p.entries()) good = good && e.grad.all_finite();
      }
      p.zero_grad();
      auto build = [&](ParamStore& ps, Tape& t) { return segmentation_forward(cfg, ps, geo, t.constant(cloud.features())); };
      const auto r = gradient_check(build, p, g, 1e-5, 1, 3);
      worst = std::max(worst, r.worst);
      good = good && r.worst < 1e-3 && r.checked + r.skipped == 3;
      if (good) ++ok;
      else failed += " " + name;
    }
    c.passed = ok == grid.size();
    c.detail = std::to_string(ok) + "/" + std::to_string(grid.size()) + " configurations; worst spot-check rel err " +
               detail::sci(worst) + (failed.empty() ? "" : "; failing:" + failed);
  });
}

/// Loads a checkpoint and runs one forward pass on a synthetic cloud.
inline Check checkpoint_fixture(const std::filesystem::path& path) {
  return detail::run(0, "checkpoint", "checkpoint " + path.string() + " loads and runs", [&](Check& c) {
    const Checkpoint ck = load_checkpoint(path);
    const PointCloud cloud = detail::random_cloud(64, ck.config.input_width, 1);
    const Tensor y = ck.config.task == Task::segmentation ? segmentation_forward(ck.config, ck.params, cloud)
                                                         : classification_forward(ck.config, ck.params, cloud);
    c.passed = y.all_finite();
    c.detail = std::to_string(ck.params.scalar_count()) + " parameters, forward " + (c.passed ? "finite" : "non-finite");
  });
}

/// Every acceptance check. `full` uses the documented trial counts; `quick`
/// shrinks them for interactive use.
inline std::vector<Check> run_all(Level level, const std::function<void(const Check&)>& on_check = {}) {
  const bool full = level == Level::full;
  std::vector<std::function<Check()>> jobs = {
      [&] { return gpa_equals_full_attention(full ? 100 : 10); },
      [&] { return fps_matches_reference(full ? 500 : 50); },
      [&] { return knn_matches_reference(full ? 200 : 20); },
      [&] { return gradients_match_finite_differences(full ? 10 : 1); },
      [&] { return permutation_equivariance(full ? 20 : 2, full ? 512 : 256); },
      [&] { return erf_enlargement(full ? 5 : 2); },
      [] { return complexity_claim(); },
      [] { return param_count_anchor(); },
      [&] { return toy_learning(full); },
      [] { return metric_oracle(); },
      [] { return residual_identity(); },
      [] { return ablation_grid_smoke(); },
  };
  std::vector<Check> out;
  for (const auto& job : jobs) {
    out.push_back(job());
    if (on_check) on_check(out.back());
  }
  return out;
}

}  // namespace appt::selftest
