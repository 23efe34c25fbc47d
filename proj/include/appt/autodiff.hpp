#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "appt/error.hpp"
#include "appt/param_store.hpp"
#include "appt/random.hpp"
#include "appt/tensor.hpp"

namespace appt {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

using IndexList = std::vector<std::size_t>;

/// Reverse-mode recording of one forward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep. Parameter leaves created from a
/// mutable ParamStore accumulate their gradient into that store when
/// backward() finishes; leaves created from a const store are constants.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf whose gradient is kept and readable through grad() after backward.
  Var input(Tensor value) { return push(std::move(value), true, {}); }

  Var param(ParamStore& store, const std::string& name) {
    const std::size_t index = store.index_of(name);
    Node node;
    node.external = &store.entry(index).value;
    node.requires_grad = true;
    node.store = &store;
    node.param_index = index;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  Var param(const ParamStore& store, const std::string& name) {
    Node node;
    node.external = &store.entry(store.index_of(name)).value;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient of the seeded objective w.r.t. `v`; zeros if nothing flowed.
  Tensor grad(Var v) const {
    check_owned(v);
    if (!backward_done_) throw StateError("gradient requested before backward()");
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0 && value(v.id).size() != 0) return Tensor(value(v.id).shape());
    return n.grad;
  }

  /// Accumulates d(sum(seed .* out))/d(leaf) into every grad-requiring leaf.
  void backward(Var out, const Tensor& seed) {
    if (nodes_.empty()) throw StateError("backward() called on an empty tape");
    check_owned(out);
    if (backward_done_) throw StateError("backward() already ran on this tape");
    if (seed.shape() != value(out).shape()) {
      throw DimensionError("seed gradient " + shape_string(seed.shape()) + " does not match output " +
                           shape_string(value(out).shape()));
    }
    backward_done_ = true;
    if (!nodes_[out.id].requires_grad) return;
    grad_mut(out.id) = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.store && n.grad.size() != 0) {
        Tensor& g = n.store->entry(n.param_index).grad;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  void backward(Var out) { backward(out, Tensor(value(out).shape(), 1.0)); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Hash of every branch decision (ReLU masks, max-pool winners) taken
  /// during the forward pass. Two evaluations with equal signatures lie on
  /// the same smooth piece of the function.
  std::uint64_t kink_signature() const noexcept { return kink_; }

  /// FLOPs (2 per multiply-add) spent in matrix products on this tape.
  std::uint64_t matmul_flops() const noexcept { return matmul_flops_; }

  // -- used by operator implementations --

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  Tensor& grad_mut(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  /// Adds `g` into node `id`'s gradient, adopting it when none exists yet.
  void add_grad(std::size_t id, Tensor g) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      n.grad = std::move(g);
      return;
    }
    for (std::size_t k = 0; k < g.size(); ++k) n.grad[k] += g[k];
  }

  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }

  void mix_kink(std::uint64_t h) noexcept { kink_ = splitmix64(kink_ ^ h); }
  void add_matmul_flops(std::uint64_t f) noexcept { matmul_flops_ += f; }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    ParamStore* store = nullptr;
    std::size_t param_index = 0;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
  std::uint64_t kink_ = 0;
  std::uint64_t matmul_flops_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw StateError("operands recorded on different tapes");
  return *a.tape;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Tensor y = matmul(a.value(), b.value());
  t.add_matmul_flops(2ULL * a.rows() * a.cols() * b.cols());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) t.add_grad(a, matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.add_grad(b, matmul_tn(t.value(a), g));
  });
}

/// a * b^T.
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Tensor y = matmul_nt(a.value(), b.value());
  t.add_matmul_flops(2ULL * a.rows() * a.cols() * b.rows());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) t.add_grad(a, matmul(g, t.value(b)));
    if (t.requires_grad(b)) t.add_grad(b, matmul_tn(g, t.value(a)));
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor y = a.value();
  detail::accumulate(y, b.value());
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) t.add_grad(a, g);
    if (t.requires_grad(b)) t.add_grad(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) t.add_grad(a, g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_mut(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_mut(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= s;
  return t.push(std::move(y), t.requires_grad(a), [a = a.id, s](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    Tensor& ga = t.grad_mut(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

/// x[n x c] + bias[c] broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  Tape& t = detail::same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor y = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) y(r, j) += bv[j];
  const bool rg = t.requires_grad(x) || t.requires_grad(bias);
  return t.push(std::move(y), rg, [x = x.id, b = bias.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(x)) t.add_grad(x, g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_mut(b);
      const std::size_t c = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g(r, j);
    }
  });
}

inline Var relu(Var x) {
  Tape& t = *x.tape;
  Tensor y = x.value();
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool on = y[i] > 0.0;
    if (!on) y[i] = 0.0;
    h = h * 0x100000001B3ULL + (on ? 0x9E37ULL : 0x1ULL);
  }
  t.mix_kink(h);
  return t.push(std::move(y), t.requires_grad(x), [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_mut(x);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

inline constexpr double kNormEpsilon = 1e-5;

/// Per-row channel standardization with learned scale and shift:
/// y = scale * (x - mean) / sqrt(var + eps) + shift.
inline Var layer_norm(Var x, Var scale_v, Var shift_v) {
  Tape& t = detail::same_tape(x, scale_v);
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  if (scale_v.value().size() != c || shift_v.value().size() != c) {
    throw DimensionError("normalization parameters do not match width " + std::to_string(c));
  }
  Tensor xhat = Tensor::matrix(n, c);
  std::vector<double> inv_std(n);
  Tensor y = Tensor::matrix(n, c);
  const Tensor& gam = scale_v.value();
  const Tensor& bet = shift_v.value();
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv(r, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv(r, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + kNormEpsilon);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (xv(r, j) - mean) * inv_std[r];
      y(r, j) = gam[j] * xhat(r, j) + bet[j];
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(scale_v) || t.requires_grad(shift_v);
  return t.push(std::move(y), rg,
                [x = x.id, sc = scale_v.id, sh = shift_v.id, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                  const Tensor& g = t.node_grad(self);
                  const std::size_t n = g.rows(), c = g.cols();
                  const Tensor& gam = t.value(sc);
                  if (t.requires_grad(sc)) {
                    Tensor& gs = t.grad_mut(sc);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < c; ++j) gs[j] += g(r, j) * xhat(r, j);
                  }
                  if (t.requires_grad(sh)) {
                    Tensor& gb = t.grad_mut(sh);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < c; ++j) gb[j] += g(r, j);
                  }
                  if (t.requires_grad(x)) {
                    Tensor& gx = t.grad_mut(x);
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::size_t r = 0; r < n; ++r) {
                      double mean_g = 0.0, mean_gx = 0.0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double gh = g(r, j) * gam[j];
                        mean_g += gh;
                        mean_gx += gh * xhat(r, j);
                      }
                      mean_g *= inv_c;
                      mean_gx *= inv_c;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double gh = g(r, j) * gam[j];
                        gx(r, j) += inv_std[r] * (gh - mean_g - xhat(r, j) * mean_gx);
                      }
                    }
                  }
                });
}

/// Softmax over each row.
inline Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  Tensor y = softmax(x.value(), 1);
  return t.push(std::move(y), t.requires_grad(x), [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_mut(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(r, j) * y(r, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(r, j) += y(r, j) * (g(r, j) - dot);
    }
  });
}

/// Rows are consecutive groups of `k`; softmax runs over each group
/// independently per column.
inline Var group_softmax(Var x, std::size_t k) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (k == 0 || xv.rows() % k != 0) {
    throw DimensionError("group size " + std::to_string(k) + " does not divide " +
                         shape_string(xv.shape()));
  }
  const std::size_t groups = xv.rows() / k;
  Tensor y = softmax(xv.reshaped({groups, k, xv.cols()}), 1).reshaped(xv.shape());
  return t.push(std::move(y), t.requires_grad(x), [x = x.id, k](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_mut(x);
    const std::size_t c = y.cols();
    const std::size_t groups = y.rows() / k;
    std::vector<double> dot(c);
    for (std::size_t n = 0; n < groups; ++n) {
      std::fill(dot.begin(), dot.end(), 0.0);
      for (std::size_t e = 0; e < k; ++e)
        for (std::size_t j = 0; j < c; ++j) dot[j] += g(n * k + e, j) * y(n * k + e, j);
      for (std::size_t e = 0; e < k; ++e)
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t r = n * k + e;
          gx(r, j) += y(r, j) * (g(r, j) - dot[j]);
        }
    }
  });
}

/// out[r] = x[index[r]]; the backward scatter runs in ascending r.
inline Var gather_rows(Var x, IndexList index) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  Tensor y = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) {
      throw IndexError("row index " + std::to_string(index[r]) + " out of range for " +
                       std::to_string(xv.rows()) + " rows");
    }
    std::copy_n(xv.row(index[r]).begin(), c, y.row(r).begin());
  }
  return t.push(std::move(y), t.requires_grad(x),
                [x = x.id, index = std::move(index)](Tape& t, std::size_t self) {
                  const Tensor& g = t.node_grad(self);
                  Tensor& gx = t.grad_mut(x);
                  const std::size_t c = g.cols();
                  for (std::size_t r = 0; r < index.size(); ++r) {
                    auto dst = gx.row(index[r]);
                    auto src = g.row(r);
                    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                  }
                });
}

/// Sums each consecutive group of `k` rows, in row order.
inline Var group_sum(Var x, std::size_t k) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (k == 0 || xv.rows() % k != 0) throw DimensionError("group size does not divide rows");
  const std::size_t groups = xv.rows() / k, c = xv.cols();
  Tensor y = Tensor::matrix(groups, c);
  for (std::size_t n = 0; n < groups; ++n)
    for (std::size_t e = 0; e < k; ++e)
      for (std::size_t j = 0; j < c; ++j) y(n, j) += xv(n * k + e, j);
  return t.push(std::move(y), t.requires_grad(x), [x = x.id, k](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    Tensor& gx = t.grad_mut(x);
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) gx(r, j) += g(r / k, j);
  });
}

/// Column-wise max over each consecutive group of `k` rows; the first
/// maximal row wins ties.
inline Var group_max(Var x, std::size_t k) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (k == 0 || xv.rows() % k != 0) throw DimensionError("group size does not divide rows");
  const std::size_t groups = xv.rows() / k, c = xv.cols();
  Tensor y = Tensor::matrix(groups, c);
  IndexList winner(groups * c);
  std::uint64_t h = 0;
  for (std::size_t n = 0; n < groups; ++n)
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = n * k;
      for (std::size_t e = 1; e < k; ++e)
        if (xv(n * k + e, j) > xv(best, j)) best = n * k + e;
      y(n, j) = xv(best, j);
      winner[n * c + j] = best;
      h = h * 0x100000001B3ULL + best;
    }
  t.mix_kink(h);
  return t.push(std::move(y), t.requires_grad(x),
                [x = x.id, winner = std::move(winner)](Tape& t, std::size_t self) {
                  const Tensor& g = t.node_grad(self);
                  Tensor& gx = t.grad_mut(x);
                  const std::size_t c = g.cols();
                  for (std::size_t n = 0; n < g.rows(); ++n)
                    for (std::size_t j = 0; j < c; ++j) gx(winner[n * c + j], j) += g(n, j);
                });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat row mismatch: " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t ca = av.cols(), cb = bv.cols();
  Tensor y = Tensor::matrix(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.row(r).begin(), ca, y.row(r).begin());
    std::copy_n(bv.row(r).begin(), cb, y.row(r).begin() + ca);
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(y), rg, [a = a.id, b = b.id, ca, cb](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_mut(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < ca; ++j) ga(r, j) += g(r, j);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_mut(b);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < cb; ++j) gb(r, j) += g(r, ca + j);
    }
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) throw DimensionError("column slice out of range");
  Tensor y = Tensor::matrix(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    std::copy_n(xv.row(r).begin() + begin, count, y.row(r).begin());
  return t.push(std::move(y), t.requires_grad(x), [x = x.id, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    Tensor& gx = t.grad_mut(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(r, begin + j) += g(r, j);
  });
}

/// Column means as a 1 x c row, summed in row order.
inline Var mean_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  if (n == 0) throw DimensionError("mean over zero rows");
  Tensor y = Tensor::matrix(1, c);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) y(0, j) += xv(r, j);
  for (std::size_t j = 0; j < c; ++j) y(0, j) /= static_cast<double>(n);
  return t.push(std::move(y), t.requires_grad(x), [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.node_grad(self);
    Tensor& gx = t.grad_mut(x);
    const double inv = 1.0 / static_cast<double>(gx.rows());
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(r, j) += g(0, j) * inv;
  });
}

/// out[i] = sum_t weight[i*per + t] * x[index[i*per + t]] with constant
/// weights, accumulated in t order.
inline Var weighted_gather(Var x, IndexList index, std::vector<double> weight, std::size_t per) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (per == 0 || index.size() % per != 0 || weight.size() != index.size()) {
    throw DimensionError("weighted_gather table shape mismatch");
  }
  const std::size_t n = index.size() / per, c = xv.cols();
  Tensor y = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < per; ++s) {
      const std::size_t src = index[i * per + s];
      if (src >= xv.rows()) throw IndexError("interpolation source out of range");
      const double w = weight[i * per + s];
      for (std::size_t j = 0; j < c; ++j) y(i, j) += w * xv(src, j);
    }
  return t.push(std::move(y), t.requires_grad(x),
                [x = x.id, index = std::move(index), weight = std::move(weight), per](
                    Tape& t, std::size_t self) {
                  const Tensor& g = t.node_grad(self);
                  Tensor& gx = t.grad_mut(x);
                  const std::size_t c = g.cols();
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t s = 0; s < per; ++s) {
                      const std::size_t src = index[i * per + s];
                      const double w = weight[i * per + s];
                      for (std::size_t j = 0; j < c; ++j) gx(src, j) += w * g(i, j);
                    }
                });
}

/// Mean over rows of -log softmax(logits)[label] as a 1 x 1 value.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape;
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), c = z.cols();
  if (labels.size() != n) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c) {
      throw InputError("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(c) + ")");
    }
  }
  Tensor prob = softmax(z, 1);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double m = z(r, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z(r, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z(r, j) - m);
    loss += -(z(r, static_cast<std::size_t>(labels[r])) - m - std::log(s));
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return t.push(Tensor({1, 1}, loss), t.requires_grad(logits),
                [x = logits.id, prob = std::move(prob), lab = std::move(lab)](Tape& t, std::size_t self) {
                  const double g = t.node_grad(self)[0];
                  Tensor& gx = t.grad_mut(x);
                  const double inv = g / static_cast<double>(prob.rows());
                  for (std::size_t r = 0; r < prob.rows(); ++r)
                    for (std::size_t j = 0; j < prob.cols(); ++j) {
                      const double target = static_cast<std::size_t>(lab[r]) == j ? 1.0 : 0.0;
                      gx(r, j) += inv * (prob(r, j) - target);
                    }
                });
}

}  // namespace appt
