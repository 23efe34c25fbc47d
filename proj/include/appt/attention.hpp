#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "appt/autodiff.hpp"
#include "appt/mlp.hpp"
#include "appt/pointcloud.hpp"

namespace appt {

/// Parameter naming for one attention operator over `channels` channels.
///
///   <prefix>.phi    query,  C -> C linear
///   <prefix>.psi    key,    C -> C linear
///   <prefix>.alpha  value,  C -> C linear
///   <prefix>.theta  relative position encoding, 3 -> C -> C (local only)
///   <prefix>.gamma  weight-generating MLP, C -> C -> C (local only)
struct AttentionParams {
  std::string prefix;
  std::size_t channels = 0;

  MlpSpec query() const { return linear_spec(prefix + ".phi", channels, channels); }
  MlpSpec key() const { return linear_spec(prefix + ".psi", channels, channels); }
  MlpSpec value() const { return linear_spec(prefix + ".alpha", channels, channels); }
  MlpSpec position() const {
    return MlpSpec{prefix + ".theta", {3, channels, channels}, Activation::relu, {true, false}, false};
  }
  MlpSpec weight() const {
    return MlpSpec{prefix + ".gamma", {channels, channels, channels}, Activation::relu, {true, false}, false};
  }

  std::vector<MlpSpec> scalar_specs() const { return {query(), key(), value()}; }
  std::vector<MlpSpec> local_specs() const { return {query(), key(), value(), position(), weight()}; }
};

namespace detail {

inline Var scalar_attention_core(Var q, Var k, Var v, std::size_t channels, Tensor* weights_out) {
  Var logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(channels)));
  Var w = softmax_rows(logits);
  if (weights_out) *weights_out = w.value();
  return matmul(w, v);
}

}  // namespace detail

/// Standard scalar self-attention over all rows of x; the logit transform is
/// the identity (logits scaled by 1/sqrt(C) before the row softmax).
template <class Store>
Var full_scalar_attention(const AttentionParams& ap, Store& params, Var x, Tensor* weights_out = nullptr) {
  Var q = mlp(ap.query(), params, x);
  Var k = mlp(ap.key(), params, x);
  Var v = mlp(ap.value(), params, x);
  return detail::scalar_attention_core(q, k, v, ap.channels, weights_out);
}

/// Global pivot attention: queries from every point, keys and values from
/// the pivot rows only. N x M scalar weights, no positional term.
template <class Store>
Var gpa(const AttentionParams& ap, Store& params, Var x_g, Var x_pivot, Tensor* weights_out = nullptr) {
  if (x_pivot.rows() == 0) throw ConfigError("global pivot attention needs at least one pivot");
  Var q = mlp(ap.query(), params, x_g);
  Var k = mlp(ap.key(), params, x_pivot);
  Var v = mlp(ap.value(), params, x_pivot);
  return detail::scalar_attention_core(q, k, v, ap.channels, weights_out);
}

/// Local group (vector) attention over each point's k neighbors:
///
///   d_ij = theta(p_i - p_j)
///   a_ij = softmax_j(gamma(q_i - k_j + d_ij))    per channel
///   y_i  = sum_j a_ij * (v_j + d_ij)             in neighbor-row order
template <class Store>
Var lga(const AttentionParams& ap, Store& params, Var x, const Tensor& positions, const NeighborIndex& nbr,
        Tensor* weights_out = nullptr) {
  const std::size_t n = x.rows(), k = nbr.k;
  if (positions.rows() != n || nbr.rows() != n) {
    throw DimensionError("neighbor table / positions do not match " + std::to_string(n) + " points");
  }
  Tape& t = *x.tape;
  IndexList center(n * k);
  Tensor rel = Tensor::matrix(n * k, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < k; ++e) {
      const std::size_t r = i * k + e, j = nbr.table[r];
      if (j >= n) throw IndexError("neighbor index " + std::to_string(j) + " out of range");
      center[r] = i;
      for (std::size_t d = 0; d < 3; ++d) rel(r, d) = positions(i, d) - positions(j, d);
    }

  Var q = mlp(ap.query(), params, x);
  Var key = mlp(ap.key(), params, x);
  Var v = mlp(ap.value(), params, x);
  Var delta = mlp(ap.position(), params, t.constant(std::move(rel)));

  Var q_rep = gather_rows(q, std::move(center));
  Var k_nbr = gather_rows(key, nbr.table);
  Var v_nbr = gather_rows(v, nbr.table);

  Var logits = mlp(ap.weight(), params, add(sub(q_rep, k_nbr), delta));
  Var w = group_softmax(logits, k);
  if (weights_out) *weights_out = w.value();
  return group_sum(mul(w, add(v_nbr, delta)), k);
}

// Tensor-level entry points (no gradient recording).

inline Tensor full_scalar_attention(const Tensor& x, const ParamStore& params, const AttentionParams& ap) {
  Tape t;
  return full_scalar_attention(ap, params, t.constant(x)).value();
}

inline Tensor gpa_forward(const Tensor& x_g, const Tensor& x_pivot, const ParamStore& params,
                          const AttentionParams& ap) {
  Tape t;
  return gpa(ap, params, t.constant(x_g), t.constant(x_pivot)).value();
}

inline Tensor lga_forward(const Tensor& x, const PointCloud& cloud, const NeighborIndex& nbr,
                          const ParamStore& params, const AttentionParams& ap) {
  Tape t;
  return lga(ap, params, t.constant(x), cloud.positions(), nbr).value();
}

/// Rows of `x` at the pivot indices, in pivot order.
inline Tensor gather_pivots(const Tensor& x, const PivotSet& pivots) {
  Tensor out = Tensor::matrix(pivots.size(), x.cols());
  for (std::size_t r = 0; r < pivots.size(); ++r)
    std::copy_n(x.row(pivots.indices[r]).begin(), x.cols(), out.row(r).begin());
  return out;
}

}  // namespace appt
