#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "appt/appt.hpp"

namespace appt::test {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            std::string_view stream = "matrix") {
  const CounterRng rng(seed, stream);
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(i, lo, hi);
  return t;
}

/// Cloud with uniform positions in [0, extent)^3 and random features.
inline PointCloud random_cloud(std::size_t n, std::size_t channels, std::uint64_t seed, double extent = 1.0) {
  Tensor pos = random_matrix(n, 3, seed, 0.0, extent, "positions");
  Tensor feat = random_matrix(n, channels, seed, -1.0, 1.0, "features");
  return PointCloud(std::move(pos), std::move(feat));
}

/// Random permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  const CounterRng rng(seed, "permutation");
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i, i)]);
  return p;
}

/// Rows of `x` reordered so that row r is x[order[r]].
inline Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  Tensor out = Tensor::matrix(order.size(), x.cols());
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(order[r], c);
  return out;
}

/// Initialized parameters with biases and norm parameters shifted off their
/// trivial defaults.
inline ParamStore params_for(const std::vector<MlpSpec>& specs, std::uint64_t seed) {
  ParamStore p = init_params(specs, seed);
  const CounterRng rng(seed, "perturb");
  std::uint64_t c = 0;
  for (auto& e : p.entries())
    if (e.name.find("weight") == std::string::npos)
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += rng.uniform(c++, -0.3, 0.3);
  return p;
}

using appt::Builder;
using appt::GradCheckResult;
using appt::gradient_check;

}  // namespace appt::test
