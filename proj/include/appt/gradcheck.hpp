#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "appt/autodiff.hpp"
#include "appt/error.hpp"
#include "appt/param_store.hpp"
#include "appt/random.hpp"
#include "appt/tensor.hpp"

namespace appt {

/// One evaluation of a scalar objective plus the branch signature of the
/// forward pass that produced it (see Tape::kink_signature).
struct Probe {
  double value = 0.0;
  std::uint64_t signature = 0;
};

using ScalarObjective = std::function<double(const ParamStore&)>;
using ProbedObjective = std::function<Probe(const ParamStore&)>;

namespace detail {

inline double checked(double v, const std::string& where) {
  if (!std::isfinite(v)) throw NumericError("non-finite objective value at " + where);
  return v;
}

}  // namespace detail

/// Central differences (f(p + h) - f(p - h)) / 2h for every scalar entry of
/// every parameter. The result mirrors `params` (names and shapes), with
/// estimates stored in the value slots.
inline ParamStore finite_diff_grad(const ScalarObjective& f, const ParamStore& params, double h) {
  if (!(h > 0.0)) throw RangeError("finite difference step must be positive");
  ParamStore work = params;
  ParamStore out;
  for (std::size_t e = 0; e < work.size(); ++e) {
    auto& entry = work.entry(e);
    Tensor est(entry.value.shape());
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const double orig = entry.value[i];
      const std::string where = entry.name + "[" + std::to_string(i) + "]";
      entry.value[i] = orig + h;
      const double up = detail::checked(f(work), where);
      entry.value[i] = orig - h;
      const double down = detail::checked(f(work), where);
      entry.value[i] = orig;
      est[i] = (up - down) / (2.0 * h);
    }
    out.add(entry.name, std::move(est));
  }
  return out;
}

/// Central difference of a single entry for an objective whose forward pass
/// may cross a non-differentiable point. When the two sides report different
/// branch signatures the step is shrunk by 10x, up to `retries` times; returns
/// nullopt if no step kept both sides on one smooth piece.
inline std::optional<double> probed_central_difference(const ProbedObjective& f, ParamStore& work,
                                                       std::size_t entry, std::size_t index, double h,
                                                       int retries = 4) {
  auto& value = work.entry(entry).value;
  const double orig = value[index];
  const std::string where = work.entry(entry).name + "[" + std::to_string(index) + "]";
  for (int attempt = 0; attempt <= retries; ++attempt, h *= 0.1) {
    value[index] = orig + h;
    const Probe up = f(work);
    value[index] = orig - h;
    const Probe down = f(work);
    value[index] = orig;
    detail::checked(up.value, where);
    detail::checked(down.value, where);
    if (up.signature == down.signature) return (up.value - down.value) / (2.0 * h);
  }
  return std::nullopt;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true
/// gradient is zero from being judged on round-off alone.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Builds the output on `t` with every parameter tracked.
using Builder = std::function<Var(ParamStore&, Tape&)>;

struct GradCheckResult {
  double worst = 0.0;
  std::string worst_entry;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Compares backward() against probed central differences of
/// sum(weights .* output) for every scalar of every parameter in `params`
/// (or `samples_per_tensor` seeded random entries when nonzero).
inline GradCheckResult gradient_check(const Builder& build, const ParamStore& params, std::uint64_t seed,
                                      double h = 1e-5, std::size_t samples_per_tensor = 0,
                                      std::size_t max_tensors = 0) {
  ParamStore work = params;
  work.zero_grad();
  Tensor weights;
  double scale = 0.0;
  {
    Tape t;
    Var y = build(work, t);
    weights = Tensor(y.shape());
    const CounterRng rng(seed, "seed");
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = rng.uniform(i, -1.0, 1.0);
    for (std::size_t i = 0; i < weights.size(); ++i) scale += std::abs(weights[i] * y.value()[i]);
    t.backward(y, weights);
  }
  // gradients far below the objective's round-off level count as zero
  const double floor = 1e-6 * std::max(1.0, scale);
  const ParamStore analytic = work;
  work.zero_grad();
  auto objective = [&](const ParamStore& p) {
    ParamStore& mp = const_cast<ParamStore&>(p);
    Tape t;
    Var y = build(mp, t);
    const Tensor& v = y.value();
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += weights[i] * v[i];
    return Probe{s, t.kink_signature()};
  };
  GradCheckResult res;
  std::vector<std::size_t> tensors;
  for (std::size_t e = 0; e < work.size(); ++e) tensors.push_back(e);
  if (max_tensors && tensors.size() > max_tensors) {
    const CounterRng rng(seed, "tensor-pick");
    for (std::size_t i = 0; i < max_tensors; ++i) std::swap(tensors[i], tensors[i + rng.below(i, tensors.size() - i)]);
    tensors.resize(max_tensors);
  }
  for (std::size_t e : tensors) {
    const std::size_t n = work.entry(e).value.size();
    std::vector<std::size_t> idx;
    if (samples_per_tensor == 0 || samples_per_tensor >= n) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      const CounterRng rng(seed, work.entry(e).name);
      for (std::size_t i = 0; i < samples_per_tensor; ++i) idx.push_back(rng.below(i, n));
    }
    for (std::size_t i : idx) {
      auto fd = probed_central_difference(objective, work, e, i, h);
      if (!fd) {
        ++res.skipped;
        continue;
      }
      const double a = analytic.entry(e).grad[i];
      const double err = relative_error(a, *fd, floor);
      ++res.checked;
      if (err > res.worst) {
        res.worst = err;
        res.worst_entry = work.entry(e).name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                          " fd=" + std::to_string(*fd);
      }
    }
  }
  return res;
}

}  // namespace appt
