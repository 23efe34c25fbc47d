#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace appt;
using appt::test::gradient_check;
using appt::test::params_for;
using appt::test::permute_rows;
using appt::test::random_cloud;
using appt::test::random_matrix;
using appt::test::random_permutation;

namespace {

Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

NetworkConfig mini_config(Task task = Task::segmentation) {
  NetworkConfig cfg;
  cfg.task = task;
  cfg.schedule.depth = {1, 1};
  cfg.schedule.channels = {8, 16};
  cfg.schedule.global_ratio = {0.0, 0.5};
  cfg.schedule.sampling_ratio = {0.0, 0.5};
  cfg.schedule.stride = {1, 2};
  cfg.schedule.decoder_depth = {1, 1};
  cfg.input_width = 4;
  cfg.num_classes = 3;
  cfg.neighbors = 4;
  cfg.seed = 5;
  return cfg;
}

ParamStore perturbed_network(const NetworkConfig& cfg, std::uint64_t seed) {
  return params_for(network_specs(cfg), seed);
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(ChannelSplit, ZeroRatioKeepsEverythingLocal) {
  const Tensor x = random_matrix(5, 8, 1);
  auto [xl, xg] = channel_split(x, 0.0);
  EXPECT_EQ(xl, x);
  EXPECT_EQ(xg.cols(), 0u);
  EXPECT_EQ(xg.rows(), 5u);
}

TEST(ChannelSplit, QuarterOfEight) {
  const Tensor x = random_matrix(4, 8, 2);
  auto [xl, xg] = channel_split(x, 0.25);
  ASSERT_EQ(xl.cols(), 6u);
  ASSERT_EQ(xg.cols(), 2u);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(xl(r, c), x(r, c));
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(xg(r, c), x(r, 6 + c));
  }
}

TEST(ChannelSplit, EighthOfThirtyTwo) {
  EXPECT_EQ(global_width(32, 1.0 / 8), 4u);
  auto [xl, xg] = channel_split(random_matrix(3, 32, 3), 1.0 / 8);
  EXPECT_EQ(xg.cols(), 4u);
  EXPECT_EQ(xl.cols(), 28u);
}

TEST(ChannelSplit, ConcatInvertsSplit) {
  for (double ratio : {0.0, 0.125, 0.25, 0.5, 1.0}) {
    const Tensor x = random_matrix(6, 16, 4);
    auto [xl, xg] = channel_split(x, ratio);
    EXPECT_EQ(fuse(xl, xg, Fusion::concat, 16), x) << ratio;
  }
  EXPECT_THROW(channel_split(random_matrix(2, 4, 1), 1.5), RangeError);
}

TEST(Fuse, ConcatKeepsColumnOrder) {
  const Tensor a = random_matrix(4, 3, 1), b = random_matrix(4, 5, 2);
  const Tensor y = fuse(a, b, Fusion::concat, 8);
  ASSERT_EQ(y.cols(), 8u);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(r, c), a(r, c));
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y(r, 3 + c), b(r, c));
  }
  EXPECT_THROW(fuse(a, b, Fusion::concat, 9), DimensionError);
}

TEST(Fuse, SumMlpWithZeroMapsIsZero) {
  const Tensor a = random_matrix(4, 3, 1), b = random_matrix(4, 5, 2);
  ParamStore p = init_params(fusion_specs("f", 3, 5, 8), 1);
  for (auto& e : p.entries()) e.value.fill(0.0);
  EXPECT_EQ(fuse(a, b, Fusion::sum_mlp, 8, p, "f"), Tensor::matrix(4, 8));
}

TEST(Fuse, SumMlpAddsProjections) {
  const Tensor a = random_matrix(4, 3, 1), b = random_matrix(4, 5, 2);
  const auto specs = fusion_specs("f", 3, 5, 8);
  const ParamStore p = params_for(specs, 2);
  const Tensor expect = plus(mlp_forward(specs[0], p, a), mlp_forward(specs[1], p, b));
  EXPECT_LT(max_abs_diff(fuse(a, b, Fusion::sum_mlp, 8, p, "f"), expect), 1e-15);
}

// ---------------------------------------------------------------------------

TEST(Block, MatchesHandComposedPipeline) {
  const BlockConfig cfg{16, 0.25, 0.25, 16, Arrangement::parallel, Fusion::concat};
  const PointCloud cloud = random_cloud(64, 16, 7);
  const ParamStore p = params_for(block_specs(cfg, "b"), 8);
  const Tensor& x = cloud.features();

  const NeighborIndex nbr = knn(cloud, 16);
  const PivotSet pivots = farthest_point_sample(cloud, 0.25);
  ASSERT_EQ(pivots.size(), 16u);
  auto [xl, xg] = channel_split(x, 0.25);
  const Tensor yl = lga_forward(xl, cloud, nbr, p, {"b.lga", 12});
  const Tensor yg = gpa_forward(xg, gather_pivots(xg, pivots), p, {"b.gpa", 4});
  const Tensor mixed = plus(x, fuse(yl, yg, Fusion::concat, 16));
  const Tensor expect = plus(mixed, mlp_forward(ffn_spec("b", 16), p, mixed));

  EXPECT_LT(max_abs_diff(appt_block_forward(x, cloud, cfg, p, "b"), expect), 1e-12);
}

TEST(Block, ZeroChannelRatioIsLocalOnly) {
  const BlockConfig cfg{8, 0.0, 0.0, 6, Arrangement::parallel, Fusion::concat};
  EXPECT_FALSE(cfg.uses_global());
  const auto specs = block_specs(cfg, "b");
  for (const auto& s : specs) EXPECT_EQ(s.name.find(".gpa"), std::string::npos) << s.name;
  const PointCloud cloud = random_cloud(20, 8, 2);
  const ParamStore p = params_for(specs, 3);
  const Tensor& x = cloud.features();
  const Tensor mixed = plus(x, lga_forward(x, cloud, knn(cloud, 6), p, {"b.lga", 8}));
  const Tensor expect = plus(mixed, mlp_forward(ffn_spec("b", 8), p, mixed));
  EXPECT_EQ(appt_block_forward(x, cloud, cfg, p, "b"), expect);
}

TEST(Block, FullChannelRatioIsGlobalOnly) {
  const BlockConfig cfg{8, 1.0, 0.5, 6, Arrangement::parallel, Fusion::concat};
  EXPECT_FALSE(cfg.uses_local());
  const PointCloud cloud = random_cloud(20, 8, 4);
  const ParamStore p = params_for(block_specs(cfg, "b"), 5);
  const Tensor& x = cloud.features();
  const PivotSet pivots = farthest_point_sample(cloud, 0.5);
  const Tensor mixed = plus(x, gpa_forward(x, gather_pivots(x, pivots), p, {"b.gpa", 8}));
  const Tensor expect = plus(mixed, mlp_forward(ffn_spec("b", 8), p, mixed));
  EXPECT_EQ(appt_block_forward(x, cloud, cfg, p, "b"), expect);
}

TEST(Block, SerialComposition) {
  const BlockConfig cfg{8, 0.5, 0.25, 5, Arrangement::serial, Fusion::concat};
  const PointCloud cloud = random_cloud(24, 8, 6);
  const ParamStore p = params_for(block_specs(cfg, "s"), 7);
  const Tensor& x = cloud.features();
  const Tensor h = plus(x, lga_forward(x, cloud, knn(cloud, 5), p, {"s.lga", 8}));
  const PivotSet pivots = farthest_point_sample(cloud, 0.25);
  const Tensor h2 = plus(h, gpa_forward(h, gather_pivots(h, pivots), p, {"s.gpa", 8}));
  const Tensor expect = plus(h2, mlp_forward(ffn_spec("s", 8), p, h2));
  EXPECT_LT(max_abs_diff(appt_block_forward(x, cloud, cfg, p, "s"), expect), 1e-12);
}

TEST(Block, ZeroedOutputProjectionsGiveIdentity) {
  for (Arrangement arr : {Arrangement::parallel, Arrangement::serial})
    for (Fusion fus : {Fusion::concat, Fusion::sum_mlp})
      for (double cr : {0.0, 0.25, 1.0}) {
        const BlockConfig cfg{16, cr, cr > 0 ? 0.25 : 0.0, 8, arr, fus};
        const PointCloud cloud = random_cloud(32, 16, 11);
        ParamStore p = params_for(block_specs(cfg, "b"), 12);
        zero_block_outputs(p);
        EXPECT_EQ(appt_block_forward(cloud.features(), cloud, cfg, p, "b"), cloud.features())
            << to_string(arr) << " " << to_string(fus) << " " << cr;
      }
}

TEST(Block, GlobalBranchWithoutPivotsIsConfigError) {
  const BlockConfig cfg{8, 0.5, 0.5, 4, Arrangement::parallel, Fusion::concat};
  const PointCloud cloud = random_cloud(10, 8, 1);
  const ParamStore p = init_params(block_specs(cfg, "b"), 1);
  BlockGeometry geo = block_geometry(cloud.positions(), 4, 0.0);
  Tape t;
  EXPECT_THROW(appt_block(cfg, "b", p, t.constant(cloud.features()), geo), ConfigError);
  const BlockConfig bad{8, 0.5, 0.0, 4, Arrangement::parallel, Fusion::concat};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Block, WidthMismatchIsDimensionError) {
  const BlockConfig cfg{8, 0.0, 0.0, 4, Arrangement::parallel, Fusion::concat};
  const PointCloud cloud = random_cloud(10, 6, 1);
  const ParamStore p = init_params(block_specs(cfg, "b"), 1);
  EXPECT_THROW(appt_block_forward(cloud.features(), cloud, cfg, p, "b"), DimensionError);
}

// ---------------------------------------------------------------------------

TEST(TransitionDown, QuartersThePointCount) {
  const PointCloud cloud = random_cloud(1024, 32, 3);
  const MlpSpec spec = down_spec("enc1", 32, 64);
  const ParamStore p = init_params(std::vector{spec}, 1);
  const auto res = transition_down(cloud, cloud.features(), 4, 16, p, spec);
  EXPECT_EQ(res.positions.rows(), 256u);
  EXPECT_EQ(res.features.rows(), 256u);
  EXPECT_EQ(res.features.cols(), 64u);
  EXPECT_EQ(downsampled_count(1023, 4), 256u);
  EXPECT_EQ(downsampled_count(1025, 4), 257u);
}

TEST(TransitionDown, ConstantFieldStaysConstant) {
  const PointCloud base = random_cloud(100, 8, 4);
  Tensor x = Tensor::matrix(100, 8);
  for (std::size_t r = 0; r < 100; ++r)
    for (std::size_t c = 0; c < 8; ++c) x(r, c) = 0.1 * static_cast<double>(c) - 0.3;
  const MlpSpec spec = down_spec("d", 8, 12);
  const ParamStore p = params_for(std::vector{spec}, 2);
  const auto res = transition_down(base, x, 4, 8, p, spec);
  for (std::size_t r = 1; r < res.features.rows(); ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(res.features(r, c), res.features(0, c));
}

TEST(TransitionDown, MaxOverPoolingNeighborhood) {
  const PointCloud cloud = random_cloud(40, 4, 5);
  const MlpSpec spec = down_spec("d", 4, 6);
  const ParamStore p = params_for(std::vector{spec}, 3);
  const auto res = transition_down(cloud, cloud.features(), 4, 5, p, spec);
  const Tensor h = mlp_forward(spec, p, cloud.features());
  const IndexList order = farthest_point_order(cloud.positions(), 10);
  for (std::size_t r = 0; r < 10; ++r) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < 40; ++j) d.emplace_back(detail::dist2(cloud.positions(), order[r], cloud.positions(), j), j);
    std::sort(d.begin(), d.end());
    for (std::size_t c = 0; c < 6; ++c) {
      double m = -INFINITY;
      for (std::size_t e = 0; e < 5; ++e) m = std::max(m, h(d[e].second, c));
      EXPECT_EQ(res.features(r, c), m);
    }
  }
}

TEST(TransitionDown, Errors) {
  const PointCloud cloud = random_cloud(8, 4, 5);
  const MlpSpec spec = down_spec("d", 4, 6);
  const ParamStore p = init_params(std::vector{spec}, 3);
  EXPECT_THROW(transition_down(cloud, cloud.features(), 4, 9, p, spec), RangeError);
  EXPECT_THROW(transition_down(cloud, cloud.features(), 1, 4, p, spec), ConfigError);
}

TEST(TransitionUp, CoincidentPointCopiesCoarseValue) {
  const Tensor coarse = random_matrix(6, 3, 1, 0.0, 1.0);
  Tensor fine = random_matrix(5, 3, 2, 0.0, 1.0);
  for (std::size_t d = 0; d < 3; ++d) fine(2, d) = coarse(4, d);
  const UpGeometry g = up_geometry(coarse, fine);
  const Tensor x = random_matrix(6, 4, 3);
  Tape t;
  const Tensor interp = weighted_gather(t.constant(x), g.sources, g.weights, g.per).value();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(interp(2, c), x(4, c));
}

TEST(TransitionUp, ConstantFieldInterpolatesToConstant) {
  const Tensor coarse = random_matrix(9, 3, 4, 0.0, 1.0), fine = random_matrix(30, 3, 5, 0.0, 1.0);
  const UpGeometry g = up_geometry(coarse, fine);
  const Tensor x = Tensor::matrix(9, 3, 0.7);
  Tape t;
  const Tensor interp = weighted_gather(t.constant(x), g.sources, g.weights, g.per).value();
  for (std::size_t i = 0; i < interp.size(); ++i) EXPECT_NEAR(interp[i], 0.7, 1e-15);
}

TEST(TransitionUp, MatchesExplicitThreeNeighborLoop) {
  const Tensor coarse = random_matrix(12, 3, 6, 0.0, 1.0), fine = random_matrix(40, 3, 7, 0.0, 1.0);
  const Tensor xc = random_matrix(12, 8, 8), skip = random_matrix(40, 4, 9);
  const MlpSpec spec = up_spec("u", 8, 4);
  const ParamStore p = params_for(std::vector{spec}, 10);
  const Tensor& w = p.value("u.up.0.weight");
  const Tensor& b = p.value("u.up.0.bias");

  Tensor expect = Tensor::matrix(40, 4);
  for (std::size_t i = 0; i < 40; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < 12; ++j) d.emplace_back(detail::dist2(fine, i, coarse, j), j);
    std::sort(d.begin(), d.end());
    double total = 0.0;
    for (std::size_t s = 0; s < 3; ++s) total += 1.0 / d[s].first;
    std::vector<double> interp(8, 0.0);
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t c = 0; c < 8; ++c) interp[c] += (1.0 / d[s].first / total) * xc(d[s].second, c);
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = b[o];
      for (std::size_t c = 0; c < 8; ++c) acc += interp[c] * w(c, o);
      expect(i, o) = acc + skip(i, o);
    }
  }
  EXPECT_LT(max_abs_diff(transition_up(coarse, fine, xc, skip, p, spec), expect), 1e-12);
}

TEST(TransitionUp, SmallCoarseCloudUsesAllPoints) {
  const Tensor coarse = random_matrix(2, 3, 1, 0.0, 1.0), fine = random_matrix(5, 3, 2, 0.0, 1.0);
  const UpGeometry g = up_geometry(coarse, fine);
  EXPECT_EQ(g.per, 2u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g.weights[2 * i] + g.weights[2 * i + 1], 1.0, 1e-15);
}

TEST(TransitionUp, SkipWidthMismatch) {
  const Tensor coarse = random_matrix(4, 3, 1, 0.0, 1.0), fine = random_matrix(6, 3, 2, 0.0, 1.0);
  const MlpSpec spec = up_spec("u", 8, 4);
  const ParamStore p = init_params(std::vector{spec}, 1);
  EXPECT_THROW(transition_up(coarse, fine, random_matrix(4, 8, 1), random_matrix(6, 5, 1), p, spec), DimensionError);
}

// ---------------------------------------------------------------------------

TEST(Network, ReferenceSegmentationShape) {
  NetworkConfig cfg = reference_config(Task::segmentation, 6, 13);
  const ParamStore p = init_network(cfg);
  const PointCloud cloud = random_cloud(1024, 6, 1);
  const Tensor y = segmentation_forward(cfg, p, cloud);
  EXPECT_EQ(y.rows(), 1024u);
  EXPECT_EQ(y.cols(), 13u);
  EXPECT_TRUE(y.all_finite());
}

TEST(Network, ReferenceClassificationShape) {
  NetworkConfig cfg = reference_config(Task::classification, 6, 3);
  const ParamStore p = init_network(cfg);
  const Tensor y = classification_forward(cfg, p, random_cloud(1024, 6, 2));
  EXPECT_EQ(y.rows(), 1u);
  EXPECT_EQ(y.cols(), 3u);
}

TEST(Network, SegmentationPermutationEquivariance) {
  const NetworkConfig cfg = mini_config();
  const ParamStore p = perturbed_network(cfg, 3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PointCloud cloud = random_cloud(48, 4, 100 + seed);
    const auto order = random_permutation(48, seed);
    const Tensor a = segmentation_forward(cfg, p, cloud);
    const Tensor b = segmentation_forward(cfg, p, cloud.permuted(order));
    EXPECT_LT(max_abs_diff(b, permute_rows(a, order)), 1e-9);
  }
}

TEST(Network, ClassificationPermutationInvariance) {
  const NetworkConfig cfg = mini_config(Task::classification);
  const ParamStore p = perturbed_network(cfg, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PointCloud cloud = random_cloud(48, 4, 200 + seed);
    const auto order = random_permutation(48, seed + 7);
    EXPECT_LT(max_abs_diff(classification_forward(cfg, p, cloud), classification_forward(cfg, p, cloud.permuted(order))),
              1e-9);
  }
}

TEST(Network, ZeroHeadGivesEqualLogits) {
  for (Task task : {Task::segmentation, Task::classification}) {
    const NetworkConfig cfg = mini_config(task);
    ParamStore p = perturbed_network(cfg, 5);
    zero_head(p);
    const PointCloud cloud = random_cloud(32, 4, 6);
    const Tensor y = task == Task::segmentation ? segmentation_forward(cfg, p, cloud) : classification_forward(cfg, p, cloud);
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t c = 1; c < y.cols(); ++c) EXPECT_EQ(y(r, c), y(r, 0));
  }
}

TEST(Network, InputMismatchesAreConfigErrors) {
  const NetworkConfig cfg = mini_config();
  const ParamStore p = init_network(cfg);
  EXPECT_THROW(segmentation_forward(cfg, p, random_cloud(32, 5, 1)), ConfigError);
  EXPECT_THROW(classification_forward(cfg, p, random_cloud(32, 4, 1)), ConfigError);
  NetworkConfig other = cfg;
  other.schedule.channels = {8, 24};
  EXPECT_THROW(segmentation_forward(other, p, random_cloud(32, 4, 1)), ConfigError);
  ParamStore extra = p;
  extra.add("stray", Tensor::matrix(1, 1));
  EXPECT_THROW(segmentation_forward(cfg, extra, random_cloud(32, 4, 1)), ConfigError);
}

TEST(Network, AblationGridRuns) {
  const PointCloud cloud = random_cloud(32, 4, 9);
  std::size_t runs = 0;
  for (Task task : {Task::segmentation, Task::classification})
    for (const auto& [name, cfg] : ablation_grid(task)) {
      const ParamStore p = init_network(cfg);
      EXPECT_EQ(p.scalar_count(), param_count(cfg)) << name;
      const Tensor y = task == Task::segmentation ? segmentation_forward(cfg, p, cloud)
                                                  : classification_forward(cfg, p, cloud);
      EXPECT_TRUE(y.all_finite()) << name;
      EXPECT_EQ(y.cols(), 3u);
      ++runs;
    }
  EXPECT_EQ(runs, 72u);
}

TEST(Network, AblationGridGradientSpotChecks) {
  const PointCloud cloud = random_cloud(24, 4, 10);
  for (const auto& [name, cfg] : ablation_grid(Task::segmentation)) {
    const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
    const ParamStore p = perturbed_network(cfg, 11);
    auto build = [&](ParamStore& ps, Tape& t) { return segmentation_forward(cfg, ps, geo, t.constant(cloud.features())); };
    const auto res = gradient_check(build, p, 11, 1e-5, 1, 3);
    EXPECT_LT(res.worst, 1e-3) << name << " " << res.worst_entry;
  }
}

// ---------------------------------------------------------------------------

TEST(ParamCount, SingleLinearLayer) { EXPECT_EQ(linear_spec("l", 32, 64).param_count(), 2112u); }

TEST(ParamCount, ReferenceSegmentationInRange) {
  const NetworkConfig cfg = reference_config(Task::segmentation, 6, 13);
  const std::size_t n = param_count(cfg);
  EXPECT_GE(n, 7'000'000u);
  EXPECT_LE(n, 10'000'000u);
  EXPECT_EQ(init_network(cfg).scalar_count(), n);
}

TEST(ParamCount, DoublingWidthsRoughlyQuadruples) {
  NetworkConfig cfg = reference_config(Task::segmentation, 6, 13);
  const double base = static_cast<double>(param_count(cfg));
  for (auto& c : cfg.schedule.channels) c *= 2;
  const double ratio = static_cast<double>(param_count(cfg)) / base;
  EXPECT_GT(ratio, 3.5);
  EXPECT_LT(ratio, 4.5);
}

TEST(ParamCount, StageOneHasNoGlobalParameters) {
  const ParamStore p = init_network(reference_config(Task::segmentation, 6, 13));
  for (const auto& e : p.entries()) {
    if (e.name.rfind("enc0.", 0) == 0 || e.name.rfind("dec0.", 0) == 0) {
      EXPECT_EQ(e.name.find(".gpa"), std::string::npos) << e.name;
    }
  }
}

TEST(ReferenceConfig, GoldenSchedule) {
  const NetworkConfig cfg = reference_config(Task::segmentation, 6, 13);
  const auto& s = cfg.schedule;
  EXPECT_EQ(s.depth, (std::vector<std::size_t>{2, 3, 4, 6, 3}));
  EXPECT_EQ(s.channels, (std::vector<std::size_t>{32, 64, 128, 256, 512}));
  EXPECT_EQ(s.sampling_ratio, (std::vector<double>{0.0, 1.0 / 64, 1.0 / 16, 1.0 / 4, 1.0}));
  EXPECT_EQ(s.global_ratio, (std::vector<double>{0.0, 1.0 / 8, 1.0 / 8, 1.0 / 4, 1.0}));
  EXPECT_EQ(s.decoder_depth, (std::vector<std::size_t>{1, 1, 1, 1, 1}));
  EXPECT_EQ(cfg.neighbors, 16u);
  EXPECT_EQ(cfg.arrangement, Arrangement::parallel);
  EXPECT_EQ(cfg.fusion, Fusion::concat);
  for (std::size_t i = 0; i < 5; ++i) {
    const double cg = s.global_ratio[i] * static_cast<double>(s.channels[i]);
    EXPECT_EQ(cg, std::round(cg)) << "stage " << i;
  }
}

TEST(ScheduleValidation, Rejections) {
  NetworkConfig cfg = mini_config();
  cfg.schedule.channels = {16, 16};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = mini_config();
  cfg.schedule.depth = {1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = mini_config();
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = mini_config();
  cfg.schedule.sampling_ratio = {0.0, 0.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = mini_config();
  cfg.schedule.stride = {1, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = mini_config();
  cfg.schedule = StageSchedule{};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitwise) {
  const NetworkConfig cfg = mini_config();
  Checkpoint ck{cfg, perturbed_network(cfg, 9)};
  const std::string bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 5), "APPT1");
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(to_json(back.config), to_json(cfg));
  ASSERT_EQ(back.params.size(), ck.params.size());
  for (std::size_t e = 0; e < ck.params.size(); ++e) {
    EXPECT_EQ(back.params.entry(e).name, ck.params.entry(e).name);
    const auto& a = ck.params.entry(e).value;
    const auto& b = back.params.entry(e).value;
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, FileRoundTrip) {
  const NetworkConfig cfg = mini_config(Task::classification);
  const Checkpoint ck{cfg, init_network(cfg)};
  const auto path = std::filesystem::temp_directory_path() / "appt_test_ckpt.bin";
  save_checkpoint(ck, path);
  EXPECT_EQ(load_checkpoint(path).params, ck.params);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const NetworkConfig cfg = mini_config();
  const std::string bytes = serialize_checkpoint({cfg, init_network(cfg)});
  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), FormatError);
  EXPECT_THROW(deserialize_checkpoint("APPT2" + bytes.substr(5)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 9)), FormatError);
  std::string meta = bytes;
  meta[14] = '#';
  EXPECT_THROW(deserialize_checkpoint(meta), FormatError);
}

// ---------------------------------------------------------------------------

TEST(ConfigJson, RoundTrip) {
  for (Task task : {Task::segmentation, Task::classification}) {
    NetworkConfig cfg = mini_config(task);
    cfg.arrangement = Arrangement::serial;
    cfg.fusion = Fusion::sum_mlp;
    EXPECT_EQ(to_json(network_from_json(to_json(cfg))), to_json(cfg));
  }
}

TEST(ConfigJson, ReferencePreset) {
  const NetworkConfig cfg = from_json_network(R"({"preset": "reference", "num_classes": 13})");
  EXPECT_EQ(to_json(cfg), to_json(reference_config(Task::segmentation, 6, 13)));
}

TEST(ConfigJson, RatioStrings) {
  const NetworkConfig cfg = from_json_network(
      R"({"stages": {"depth": [1, 1], "channels": [8, 16], "global_ratio": [0, "1/8"], "sampling_ratio": [0, "1/4"]}})");
  EXPECT_EQ(cfg.schedule.global_ratio[1], 0.125);
  EXPECT_EQ(cfg.schedule.sampling_ratio[1], 0.25);
  EXPECT_EQ(cfg.schedule.stride, (std::vector<std::size_t>{1, 4}));
}

TEST(ConfigJson, ErrorsNameTheField) {
  auto message = [](const std::string& text) {
    try {
      from_json_network(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"preset": "reference", "task": "detect"})").find("task"), std::string::npos);
  EXPECT_NE(message(R"({"preset": "reference", "fusion": "mean"})").find("fusion"), std::string::npos);
  EXPECT_NE(message(R"({"preset": "huge"})").find("preset"), std::string::npos);
  EXPECT_NE(message(R"({"num_classes": 3})").find("stages"), std::string::npos);
  EXPECT_NE(message(R"({"preset": "reference", "num_classes": -1})").find("num_classes"), std::string::npos);
  EXPECT_NE(message(R"({"preset": "reference", "stages": {"global_ratio": [0, 0.1, 2, 0.2, 1]}})").find("global_ratio"),
            std::string::npos);
  EXPECT_NE(message(R"({"preset": "reference", "stages": {"depth": [1, 1]}})").find("stages"), std::string::npos);
  EXPECT_NE(message("{not json").find("JSON"), std::string::npos);
}

// ---------------------------------------------------------------------------

TEST(NetworkGradient, MiniSegmentationNetwork) {
  const NetworkConfig cfg = mini_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const PointCloud cloud = random_cloud(16, 4, 300 + seed);
    const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
    const ParamStore p = perturbed_network(cfg, seed);
    auto build = [&](ParamStore& ps, Tape& t) { return segmentation_forward(cfg, ps, geo, t.constant(cloud.features())); };
    const auto res = gradient_check(build, p, seed, 1e-5, 6);
    EXPECT_LT(res.worst, 1e-4) << res.worst_entry;
    EXPECT_GT(res.checked, 100u);
  }
}

TEST(NetworkGradient, MiniClassificationNetwork) {
  const NetworkConfig cfg = mini_config(Task::classification);
  const PointCloud cloud = random_cloud(16, 4, 77);
  const NetworkGeometry geo = network_geometry(cfg, cloud.positions());
  const ParamStore p = perturbed_network(cfg, 8);
  auto build = [&](ParamStore& ps, Tape& t) { return classification_forward(cfg, ps, geo, t.constant(cloud.features())); };
  const auto res = gradient_check(build, p, 8, 1e-5, 6);
  EXPECT_LT(res.worst, 1e-4) << res.worst_entry;
}

TEST(NetworkGradient, SumFusionBlock) {
  const BlockConfig cfg{8, 0.5, 0.5, 4, Arrangement::parallel, Fusion::sum_mlp};
  const PointCloud cloud = random_cloud(12, 8, 5);
  const BlockGeometry geo = block_geometry(cloud.positions(), 4, 0.5);
  const ParamStore p = params_for(block_specs(cfg, "b"), 6);
  auto build = [&](ParamStore& ps, Tape& t) { return appt_block(cfg, "b", ps, t.constant(cloud.features()), geo); };
  const auto res = gradient_check(build, p, 6);
  EXPECT_LT(res.worst, 1e-4) << res.worst_entry;
}
