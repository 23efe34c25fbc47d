#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace appt;
using appt::test::gradient_check;
using appt::test::random_matrix;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Per-row softmax with long double accumulation.
std::vector<double> direct_softmax(std::span<const double> x) {
  long double m = x[0];
  for (double v : x) m = std::max<long double>(m, v);
  long double z = 0;
  for (double v : x) z += std::exp(static_cast<long double>(v) - m);
  std::vector<double> out;
  for (double v : x) out.push_back(static_cast<double>(std::exp(static_cast<long double>(v) - m) / z));
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::vector({1, 2}).rows(), DimensionError);
  EXPECT_THROW(Tensor::from_rows({{1, 2}, {3}}), DimensionError);
  EXPECT_EQ(shape_string({3, 4}), "[3x4]");
}

TEST(Matmul, IdentityLeft) {
  const Tensor i2 = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(i2, a), a);
}

TEST(Matmul, HandSum) {
  EXPECT_EQ(matmul(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{1}, {1}})), Tensor::from_rows({{3}, {7}}));
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Tensor a = random_matrix(8, 8, seed, -1, 1, "a");
    const Tensor b = random_matrix(8, 8, seed, -1, 1, "b");
    EXPECT_EQ(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 0.0);
    EXPECT_EQ(matmul_nt(a, b), naive_matmul(a, transpose(b)));
    EXPECT_EQ(matmul_tn(a, b), naive_matmul(transpose(a), b));
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::matrix(2, 3), Tensor::matrix(4, 5));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, AssociativeWithinTolerance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor a = random_matrix(5, 7, seed, -1, 1, "a");
    const Tensor b = random_matrix(7, 3, seed, -1, 1, "b");
    const Tensor c = random_matrix(3, 6, seed, -1, 1, "c");
    const Tensor l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.size(); ++i) EXPECT_LE(relative_error(l[i], r[i], 1e-12), 1e-9);
  }
}

TEST(Matmul, Deterministic) {
  const Tensor a = random_matrix(16, 9, 3), b = random_matrix(9, 11, 4);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Softmax, Uniform) {
  const Tensor s = softmax(Tensor::vector({0, 0, 0}), 0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedForm) {
  const Tensor s = softmax(Tensor::vector({0, std::log(3.0)}), 0);
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, MatchesDirectFormula) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_matrix(1, 17, seed, -5, 5);
    const Tensor s = softmax(x, 1);
    const auto ref = direct_softmax(x.row(0));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_LT(std::abs(s[i] - ref[i]), 1e-14);
  }
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor x = random_matrix(6, 9, seed, -20, 20);
    for (std::size_t axis : {0u, 1u}) {
      const Tensor s = softmax(x, axis);
      if (axis == 1) {
        for (std::size_t r = 0; r < 6; ++r) {
          double z = 0;
          for (double v : s.row(r)) z += v;
          EXPECT_NEAR(z, 1.0, 1e-12);
        }
      } else {
        for (std::size_t c = 0; c < 9; ++c) {
          double z = 0;
          for (std::size_t r = 0; r < 6; ++r) z += s(r, c);
          EXPECT_NEAR(z, 1.0, 1e-12);
        }
      }
      for (std::size_t i = 0; i < s.size(); ++i) EXPECT_GE(s[i], 0.0);
      Tensor shifted = x;
      for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 7.25;
      EXPECT_LT(max_abs_diff(softmax(shifted, axis), s), 1e-12);
    }
  }
}

TEST(Softmax, Errors) {
  EXPECT_THROW(softmax(Tensor::matrix(3, 0), 1), DimensionError);
  EXPECT_THROW(softmax(Tensor::matrix(3, 2), 2), DimensionError);
}

TEST(Softmax, ExtremeLogitsStayFinite) {
  const Tensor s = softmax(Tensor::vector({1000, -1000, 0}), 0);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(Mlp, IdentityLayer) {
  const MlpSpec spec = linear_spec("m", 3, 3);
  ParamStore p;
  p.add("m.0.weight", Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  p.add("m.0.bias", Tensor::vector({0, 0, 0}));
  const Tensor x = random_matrix(5, 3, 1);
  EXPECT_EQ(mlp_forward(spec, p, x), x);
}

TEST(Mlp, ZeroWeightsGiveBias) {
  const MlpSpec spec = linear_spec("m", 4, 2);
  ParamStore p;
  p.add("m.0.weight", Tensor::matrix(4, 2));
  p.add("m.0.bias", Tensor::vector({0.5, -2}));
  const Tensor y = mlp_forward(spec, p, random_matrix(6, 4, 2));
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(y(r, 0), 0.5);
    EXPECT_EQ(y(r, 1), -2.0);
  }
}

TEST(Mlp, MatchesLayerByLayerReference) {
  const MlpSpec spec{"m", {5, 7, 3}, Activation::relu, {true, false}, false};
  ParamStore p = init_params(std::vector<MlpSpec>{spec}, 11);
  for (auto& e : p.entries())
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += 0.1 * std::sin(1.0 + i);
  const Tensor x = random_matrix(9, 5, 3);

  Tensor h = naive_matmul(x, p.value("m.0.weight"));
  for (std::size_t r = 0; r < h.rows(); ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 7; ++c) h(r, c) += p.value("m.0.bias")[c];
    for (std::size_t c = 0; c < 7; ++c) mean += h(r, c);
    mean /= 7;
    for (std::size_t c = 0; c < 7; ++c) var += (h(r, c) - mean) * (h(r, c) - mean);
    var /= 7;
    for (std::size_t c = 0; c < 7; ++c) {
      double v = (h(r, c) - mean) / std::sqrt(var + kNormEpsilon);
      v = v * p.value("m.0.norm_scale")[c] + p.value("m.0.norm_shift")[c];
      h(r, c) = std::max(v, 0.0);
    }
  }
  Tensor y = naive_matmul(h, p.value("m.1.weight"));
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < 3; ++c) y(r, c) += p.value("m.1.bias")[c];
  EXPECT_LT(max_abs_diff(mlp_forward(spec, p, x), y), 1e-12);
}

TEST(Mlp, MissingParameterIsLookupError) {
  const MlpSpec spec = linear_spec("m", 2, 2);
  ParamStore p;
  p.add("m.0.weight", Tensor::matrix(2, 2));
  EXPECT_THROW(mlp_forward(spec, p, Tensor::matrix(1, 2)), LookupError);
}

TEST(Mlp, WrongInputWidth) {
  const MlpSpec spec = linear_spec("m", 2, 2);
  const ParamStore p = init_params(std::vector<MlpSpec>{spec}, 0);
  EXPECT_THROW(mlp_forward(spec, p, Tensor::matrix(1, 3)), DimensionError);
}

TEST(Mlp, SpecValidation) {
  EXPECT_THROW((MlpSpec{"m", {3}, Activation::relu, {}, false}.validate()), ConfigError);
  EXPECT_THROW((MlpSpec{"m", {3, 0}, Activation::relu, {}, false}.validate()), ConfigError);
  EXPECT_EQ(linear_spec("m", 32, 64).param_count(), 2112u);
}

// ---------------------------------------------------------------------------

TEST(InitParams, SameSeedIdentical) {
  const std::vector<MlpSpec> specs{{"a", {6, 8, 4}, Activation::relu, {true, false}, false}};
  EXPECT_EQ(init_params(specs, 42), init_params(specs, 42));
}

TEST(InitParams, DifferentSeedsDiffer) {
  const std::vector<MlpSpec> specs{linear_spec("a", 6, 8)};
  EXPECT_FALSE(init_params(specs, 1) == init_params(specs, 2));
}

TEST(InitParams, FanInBound) {
  const std::vector<MlpSpec> specs{linear_spec("a", 6, 10000 / 6 + 1)};
  const ParamStore p = init_params(specs, 9);
  const Tensor& w = p.value("a.0.weight");
  ASSERT_GE(w.size(), 10000u);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_LE(std::abs(w[i]), 1.0);
  for (double b : p.value("a.0.bias").data()) EXPECT_EQ(b, 0.0);
}

TEST(InitParams, NormDefaults) {
  const std::vector<MlpSpec> specs{{"a", {3, 4}, Activation::relu, {true}, true}};
  const ParamStore p = init_params(specs, 0);
  for (double v : p.value("a.0.norm_scale").data()) EXPECT_EQ(v, 1.0);
  for (double v : p.value("a.0.norm_shift").data()) EXPECT_EQ(v, 0.0);
}

TEST(ParamStore, Invariants) {
  ParamStore p;
  p.add("w", Tensor::matrix(2, 3));
  EXPECT_THROW(p.add("w", Tensor::matrix(1, 1)), ConfigError);
  EXPECT_EQ(p.grad("w").shape(), p.value("w").shape());
  EXPECT_THROW(p.value("missing"), LookupError);
  EXPECT_EQ(p.scalar_count(), 6u);
}

TEST(Random, CounterRngIsStateless) {
  const CounterRng a(5, "x"), b(5, "x"), c(6, "x");
  EXPECT_EQ(a.word(17), b.word(17));
  EXPECT_NE(a.word(17), c.word(17));
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const double u = a.uniform(i);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.below(i, 7), 7u);
  }
}

// ---------------------------------------------------------------------------

TEST(Backward, IdentityGradientIsSeed) {
  Tape t;
  Var x = t.input(Tensor::from_rows({{2.0}}));
  t.backward(x, Tensor::from_rows({{1.0}}));
  EXPECT_EQ(t.grad(x)(0, 0), 1.0);
}

TEST(Backward, LinearMapAdjoint) {
  const Tensor w = random_matrix(3, 4, 1), x0 = random_matrix(4, 1, 2), g = random_matrix(3, 1, 3);
  Tape t;
  Var x = t.input(x0);
  Var y = matmul(t.constant(w), x);
  t.backward(y, g);
  EXPECT_LT(max_abs_diff(t.grad(x), naive_matmul(transpose(w), g)), 1e-15);
}

TEST(Backward, StateErrors) {
  Tape empty;
  Var dangling{&empty, 0};
  EXPECT_THROW(empty.backward(dangling, Tensor()), StateError);

  Tape t;
  Var x = t.input(Tensor::matrix(2, 2, 1.0));
  EXPECT_THROW(t.grad(x), StateError);
  EXPECT_THROW(t.backward(x, Tensor::matrix(1, 2)), DimensionError);
  t.backward(x);
  EXPECT_THROW(t.backward(x), StateError);

  Tape other;
  Var y = other.input(Tensor::matrix(1, 1));
  EXPECT_THROW(t.grad(y), StateError);
}

TEST(Backward, AccumulatesIntoStore) {
  ParamStore p;
  p.add("w", Tensor::from_rows({{2.0}}));
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    Var y = matmul(t.constant(Tensor::from_rows({{3.0}})), t.param(p, "w"));
    t.backward(y);
  }
  EXPECT_EQ(p.grad("w")(0, 0), 6.0);
  p.zero_grad();
  EXPECT_EQ(p.grad("w")(0, 0), 0.0);
}

TEST(Backward, ConstStoreLeavesAreConstants) {
  ParamStore p;
  p.add("w", Tensor::from_rows({{2.0}}));
  const ParamStore& cp = p;
  Tape t;
  Var y = matmul(t.input(Tensor::from_rows({{3.0}})), t.param(cp, "w"));
  t.backward(y);
  EXPECT_EQ(p.grad("w")(0, 0), 0.0);
}

TEST(FiniteDiff, Quadratic) {
  ParamStore p;
  p.add("t", Tensor::vector({3.0}));
  const ParamStore g = finite_diff_grad([](const ParamStore& s) { return s.value("t")[0] * s.value("t")[0]; }, p, 1e-5);
  EXPECT_NEAR(g.value("t")[0], 6.0, 1e-8);
}

TEST(FiniteDiff, ConstantIsZero) {
  ParamStore p;
  p.add("t", random_matrix(3, 3, 1));
  const ParamStore g = finite_diff_grad([](const ParamStore&) { return 4.0; }, p, 1e-5);
  for (double v : g.value("t").data()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, SineAgreesWithCosine) {
  ParamStore p;
  p.add("t", Tensor::vector({0.3, 1.1, -2.0}));
  const ParamStore g = finite_diff_grad(
      [](const ParamStore& s) {
        double v = 0;
        for (double t : s.value("t").data()) v += std::sin(t);
        return v;
      },
      p, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(relative_error(g.value("t")[i], std::cos(p.value("t")[i])), 1e-8);
}

TEST(FiniteDiff, Errors) {
  ParamStore p;
  p.add("t", Tensor::vector({1.0}));
  EXPECT_THROW(finite_diff_grad([](const ParamStore&) { return std::nan(""); }, p, 1e-5), NumericError);
  EXPECT_THROW(finite_diff_grad([](const ParamStore&) { return 0.0; }, p, 0.0), RangeError);
}

// ---------------------------------------------------------------------------
// Every differentiable operator against central differences, 20 seeds each.

namespace {

struct OpCase {
  const char* name;
  std::function<ParamStore(std::uint64_t)> inputs;
  appt::test::Builder build;
};

ParamStore store_of(std::initializer_list<std::pair<const char*, Tensor>> items) {
  ParamStore p;
  for (const auto& [n, t] : items) p.add(n, t);
  return p;
}

std::vector<OpCase> op_cases() {
  using T = Tensor;
  auto m = [](std::size_t r, std::size_t c, std::uint64_t s, const char* st) { return random_matrix(r, c, s, -1, 1, st); };
  std::vector<OpCase> v;
  v.push_back({"matmul", [=](auto s) { return store_of({{"a", m(3, 4, s, "a")}, {"b", m(4, 5, s, "b")}}); },
               [](ParamStore& p, Tape& t) { return matmul(t.param(p, "a"), t.param(p, "b")); }});
  v.push_back({"matmul_nt", [=](auto s) { return store_of({{"a", m(3, 4, s, "a")}, {"b", m(5, 4, s, "b")}}); },
               [](ParamStore& p, Tape& t) { return matmul_nt(t.param(p, "a"), t.param(p, "b")); }});
  v.push_back({"add_sub_mul", [=](auto s) { return store_of({{"a", m(3, 4, s, "a")}, {"b", m(3, 4, s, "b")}}); },
               [](ParamStore& p, Tape& t) {
                 Var a = t.param(p, "a"), b = t.param(p, "b");
                 return mul(add(a, b), sub(a, scale(b, 0.5)));
               }});
  v.push_back({"add_bias", [=](auto s) { return store_of({{"x", m(4, 3, s, "x")}, {"b", m(1, 3, s, "b").reshaped({3})}}); },
               [](ParamStore& p, Tape& t) { return add_bias(t.param(p, "x"), t.param(p, "b")); }});
  v.push_back({"relu", [=](auto s) { return store_of({{"x", m(5, 4, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return relu(t.param(p, "x")); }});
  v.push_back({"layer_norm",
               [=](auto s) {
                 return store_of({{"x", m(4, 6, s, "x")},
                                  {"g", m(1, 6, s, "g").reshaped({6})},
                                  {"b", m(1, 6, s, "b").reshaped({6})}});
               },
               [](ParamStore& p, Tape& t) { return layer_norm(t.param(p, "x"), t.param(p, "g"), t.param(p, "b")); }});
  v.push_back({"softmax_rows", [=](auto s) { return store_of({{"x", m(3, 5, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return softmax_rows(scale(t.param(p, "x"), 2.0)); }});
  v.push_back({"group_softmax", [=](auto s) { return store_of({{"x", m(6, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return group_softmax(t.param(p, "x"), 3); }});
  v.push_back({"gather_group_sum", [=](auto s) { return store_of({{"x", m(4, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return group_sum(gather_rows(t.param(p, "x"), {0, 2, 2, 3, 1, 0}), 2); }});
  v.push_back({"group_max", [=](auto s) { return store_of({{"x", m(6, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return group_max(t.param(p, "x"), 3); }});
  v.push_back({"concat_slice", [=](auto s) { return store_of({{"a", m(3, 2, s, "a")}, {"b", m(3, 4, s, "b")}}); },
               [](ParamStore& p, Tape& t) {
                 Var c = concat_cols(t.param(p, "a"), t.param(p, "b"));
                 return mul(slice_cols(c, 1, 3), slice_cols(c, 3, 3));
               }});
  v.push_back({"mean_rows", [=](auto s) { return store_of({{"x", m(5, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) { return mean_rows(t.param(p, "x")); }});
  v.push_back({"weighted_gather", [=](auto s) { return store_of({{"x", m(4, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) {
                 return weighted_gather(t.param(p, "x"), {0, 1, 3, 2, 2, 0}, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3}, 3);
               }});
  v.push_back({"cross_entropy", [=](auto s) { return store_of({{"x", m(4, 3, s, "x")}}); },
               [](ParamStore& p, Tape& t) {
                 static const std::vector<int> labels{0, 2, 1, 2};
                 return cross_entropy(scale(t.param(p, "x"), 3.0), labels);
               }});
  v.push_back({"mlp",
               [](auto s) {
                 ParamStore p = init_params(std::vector<MlpSpec>{{"m", {3, 5, 2}, Activation::relu, {true, true}, true}}, s);
                 p.add("x", random_matrix(6, 3, s, -1, 1, "x"));
                 return p;
               },
               [](ParamStore& p, Tape& t) {
                 return mlp(MlpSpec{"m", {3, 5, 2}, Activation::relu, {true, true}, true}, p, t.param(p, "x"));
               }});
  return v;
}

}  // namespace

class OperatorGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OperatorGradient, MatchesFiniteDifferences) {
  const OpCase c = op_cases()[GetParam()];
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto r = gradient_check(c.build, c.inputs(seed), seed);
    EXPECT_LT(r.worst, 1e-4) << c.name << " seed " << seed << ": " << r.worst_entry;
    EXPECT_GT(r.checked, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OperatorGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(CrossEntropy, UniformTwoClass) {
  Tape t;
  const std::vector<int> labels{1};
  Var l = cross_entropy(t.constant(Tensor::matrix(1, 2)), labels);
  EXPECT_NEAR(l.value()(0, 0), std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, LargeGapTendsToZero) {
  Tape t;
  const std::vector<int> labels{0};
  Var l = cross_entropy(t.constant(Tensor::from_rows({{20.0, 0.0}})), labels);
  EXPECT_LT(l.value()(0, 0), 1e-6);
  EXPECT_GE(l.value()(0, 0), 0.0);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor x = random_matrix(7, 4, seed, -6, 6);
    std::vector<int> labels;
    for (std::size_t r = 0; r < 7; ++r) labels.push_back(static_cast<int>((r + seed) % 4));
    double ref = 0;
    for (std::size_t r = 0; r < 7; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < 4; ++c) z += std::exp(x(r, c));
      ref += -(x(r, static_cast<std::size_t>(labels[r])) - std::log(z));
    }
    ref /= 7;
    Tape t;
    EXPECT_LT(std::abs(cross_entropy(t.constant(x), labels).value()(0, 0) - ref), 1e-12);
  }
}

TEST(CrossEntropy, BadLabels) {
  Tape t;
  Var x = t.constant(Tensor::matrix(2, 3));
  const std::vector<int> out_of_range{0, 3}, short_list{0};
  EXPECT_THROW(cross_entropy(x, out_of_range), InputError);
  EXPECT_THROW(cross_entropy(x, short_list), InputError);
}

TEST(Autodiff, KinkSignatureTracksReluMask) {
  auto sig = [](double v) {
    Tape t;
    relu(t.constant(Tensor::from_rows({{v, 1.0}})));
    return t.kink_signature();
  };
  EXPECT_EQ(sig(0.5), sig(0.7));
  EXPECT_NE(sig(0.5), sig(-0.5));
}

TEST(Autodiff, MatmulFlopsCounter) {
  Tape t;
  matmul(t.constant(Tensor::matrix(10, 4)), t.constant(Tensor::matrix(4, 8)));
  EXPECT_EQ(t.matmul_flops(), 640u);
}
