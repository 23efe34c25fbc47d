#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "appt/autodiff.hpp"
#include "appt/error.hpp"
#include "appt/param_store.hpp"
#include "appt/random.hpp"
#include "appt/tensor.hpp"

namespace appt {

enum class Activation { none, relu };

/// A stack of affine layers. Layer l maps widths[l] -> widths[l+1] and is
/// optionally followed by per-point channel normalization and the activation.
/// The activation is skipped on the final layer unless `activate_last` is set.
///
/// Parameters live under `<name>.<l>.weight` (in x out), `<name>.<l>.bias`,
/// and for normalized layers `<name>.<l>.norm_scale` / `<name>.<l>.norm_shift`.
struct MlpSpec {
  std::string name;
  std::vector<std::size_t> widths;
  Activation activation = Activation::relu;
  std::vector<bool> normalize;  // one flag per layer; empty means none
  bool activate_last = false;

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t in_width() const { return widths.front(); }
  std::size_t out_width() const { return widths.back(); }
  bool normalized(std::size_t layer) const { return layer < normalize.size() && normalize[layer]; }

  std::string weight_name(std::size_t l) const { return name + "." + std::to_string(l) + ".weight"; }
  std::string bias_name(std::size_t l) const { return name + "." + std::to_string(l) + ".bias"; }
  std::string norm_scale_name(std::size_t l) const {
    return name + "." + std::to_string(l) + ".norm_scale";
  }
  std::string norm_shift_name(std::size_t l) const {
    return name + "." + std::to_string(l) + ".norm_shift";
  }

  void validate() const {
    if (widths.size() < 2) throw ConfigError("MLP '" + name + "' needs at least one layer");
    for (std::size_t w : widths)
      if (w == 0) throw ConfigError("MLP '" + name + "' has a zero width");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers(); ++l) {
      n += widths[l] * widths[l + 1] + widths[l + 1];
      if (normalized(l)) n += 2 * widths[l + 1];
    }
    return n;
  }
};

inline MlpSpec linear_spec(std::string name, std::size_t in, std::size_t out) {
  return MlpSpec{std::move(name), {in, out}, Activation::none, {}, false};
}

/// Weights uniform in +-sqrt(6 / fan_in), biases zero, normalization scale
/// one and shift zero. Draw i of tensor `name` is CounterRng(seed, name)
/// counter i, so values depend only on (seed, name, position).
inline ParamStore init_params(std::span<const MlpSpec> specs, std::uint64_t seed) {
  ParamStore store;
  for (const MlpSpec& spec : specs) {
    spec.validate();
    for (std::size_t l = 0; l < spec.layers(); ++l) {
      const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
      const std::string wname = spec.weight_name(l);
      const CounterRng rng(seed, wname);
      const double bound = std::sqrt(6.0 / static_cast<double>(in));
      Tensor w = Tensor::matrix(in, out);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(i, -bound, bound);
      store.add(wname, std::move(w));
      store.add(spec.bias_name(l), Tensor({out}));
      if (spec.normalized(l)) {
        store.add(spec.norm_scale_name(l), Tensor({out}, 1.0));
        store.add(spec.norm_shift_name(l), Tensor({out}));
      }
    }
  }
  return store;
}

/// Verifies that `store` holds every tensor of `spec` with the right shape.
inline void check_params(const MlpSpec& spec, const ParamStore& store) {
  auto expect = [&](const std::string& name, const Shape& shape) {
    if (!store.contains(name)) throw LookupError("missing parameter '" + name + "'");
    if (store.value(name).shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " +
                        shape_string(store.value(name).shape()) + ", expected " + shape_string(shape));
    }
  };
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    expect(spec.weight_name(l), {spec.widths[l], spec.widths[l + 1]});
    expect(spec.bias_name(l), {spec.widths[l + 1]});
    if (spec.normalized(l)) {
      expect(spec.norm_scale_name(l), {spec.widths[l + 1]});
      expect(spec.norm_shift_name(l), {spec.widths[l + 1]});
    }
  }
}

/// Records the MLP on `x`'s tape. `Store` is ParamStore (gradients flow into
/// it) or const ParamStore (parameters are constants).
template <class Store>
Var mlp(const MlpSpec& spec, Store& params, Var x) {
  if (x.cols() != spec.in_width()) {
    throw DimensionError("MLP '" + spec.name + "' expects width " + std::to_string(spec.in_width()) +
                         ", got " + shape_string(x.shape()));
  }
  Tape& t = *x.tape;
  Var h = x;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    h = add_bias(matmul(h, t.param(params, spec.weight_name(l))), t.param(params, spec.bias_name(l)));
    if (spec.normalized(l)) {
      h = layer_norm(h, t.param(params, spec.norm_scale_name(l)), t.param(params, spec.norm_shift_name(l)));
    }
    const bool last = l + 1 == spec.layers();
    if (spec.activation == Activation::relu && (!last || spec.activate_last)) h = relu(h);
  }
  return h;
}

/// Tensor-in, tensor-out evaluation without gradient recording.
inline Tensor mlp_forward(const MlpSpec& spec, const ParamStore& params, const Tensor& x) {
  Tape tape;
  Var in = tape.constant(x);
  return mlp(spec, params, in).value();
}

}  // namespace appt
