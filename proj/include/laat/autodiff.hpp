// Reverse-mode differentiation over a linear tape.
//
// A Tape owns every intermediate value of one forward pass. Leaves are
// created with `leaf` (differentiable) or `constant`; each primitive records
// its output and a closure that pushes the output gradient into its parents.
// `backward` on a scalar output then walks the tape once in reverse, so
// gradients reach parameters and network inputs alike.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "laat/tensor.hpp"

namespace laat {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), true, {}); }
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Records an op output. `backward` is only kept when some parent needs a
  /// gradient.
  Var record(Tensor value, std::initializer_list<Var> parents,
             BackwardFn backward) {
    bool needs = false;
    for (const Var& p : parents) {
      if (p.tape != this) throw std::logic_error("var from another tape");
      needs = needs || nodes_[p.id].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient of the last `backward` target w.r.t. `v`; zeros if unreached.
  const Tensor& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Accumulation target used by backward closures.
  Tensor& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool wants(Var v) const { return nodes_[v.id].needs_grad; }

  void backward(Var out) {
    if (value(out).size() != 1) {
      throw std::invalid_argument("backward: output must be scalar, got shape " +
                                  value(out).shape_string());
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_ref(out)[0] = 1.0;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Copy: the closure may grow grads of earlier nodes only.
      const Tensor g = n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), needs, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }
inline const Tensor& Var::grad() const { return tape->grad(*this); }

namespace ad {

inline void accumulate(Tape& t, Var v, const Tensor& g) {
  if (!t.wants(v)) return;
  Tensor& dst = t.grad_ref(v);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

inline Var matmul(Var a, Var b) {
  Tensor out = laat::matmul(a.value(), b.value());
  return a.tape->record(std::move(out), {a, b},
                        [a, b](Tape& t, const Tensor& g) {
                          if (t.wants(a))
                            accumulate(t, a, laat::matmul(g, b.value(), true));
                          if (t.wants(b))
                            accumulate(t, b, laat::matmul_at(a.value(), g));
                        });
}

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record(std::move(out), {a, b},
                        [a, b](Tape& t, const Tensor& g) {
                          accumulate(t, a, g);
                          accumulate(t, b, g);
                        });
}

/// x (B x n) + bias (1 x n or n) broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_matrix(xv, "add_bias");
  if (bv.size() != xv.cols()) {
    throw std::invalid_argument("add_bias: shape mismatch " + xv.shape_string() +
                                " vs " + bv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape->record(std::move(out), {x, bias},
                        [x, bias](Tape& t, const Tensor& g) {
                          accumulate(t, x, g);
                          if (!t.wants(bias)) return;
                          Tensor& db = t.grad_ref(bias);
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            auto row = g.row(r);
                            for (std::size_t c = 0; c < row.size(); ++c)
                              db[c] += row[c];
                          }
                        });
}

inline Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= s;
  return x.tape->record(std::move(out), {x}, [x, s](Tape& t, const Tensor& g) {
    Tensor d = g;
    for (double& v : d.data()) v *= s;
    accumulate(t, x, d);
  });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor d = g;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(xv[i] > 0.0)) d[i] = 0.0;
    accumulate(t, x, d);
  });
}

inline constexpr double kNormFloor = 1e-12;

/// Row-wise z = x / max(||x||, kNormFloor); an all-zero row maps to zero.
inline Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "l2_normalize_rows");
  Tensor out = xv;
  std::vector<double> norms(xv.rows());
  std::vector<bool> floored(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double n = norm2(xv.row(r));
    floored[r] = !(n > kNormFloor);
    norms[r] = floored[r] ? kNormFloor : n;
    for (double& v : out.row(r)) v /= norms[r];
  }
  Tensor z = out;
  return x.tape->record(
      std::move(out), {x},
      [x, z = std::move(z), norms = std::move(norms), floored = std::move(floored)](
          Tape& t, const Tensor& g) {
        // dx = (g - <g, z> z) / ||x||, or g / floor below the floor
        Tensor d = g;
        for (std::size_t r = 0; r < d.rows(); ++r) {
          const double gz = floored[r] ? 0.0 : dot(g.row(r), z.row(r));
          auto dr = d.row(r);
          auto zr = z.row(r);
          for (std::size_t c = 0; c < dr.size(); ++c)
            dr[c] = (dr[c] - gz * zr[c]) / norms[r];
        }
        accumulate(t, x, d);
      });
}

/// Row-wise log-softmax, computed with the max-shift.
inline Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "log_softmax_rows");
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    const double lse = m + std::log(s);
    for (double& v : row) v -= lse;
  }
  Tensor logp = out;
  return x.tape->record(std::move(out), {x},
                        [x, logp = std::move(logp)](Tape& t, const Tensor& g) {
                          Tensor d = g;
                          for (std::size_t r = 0; r < d.rows(); ++r) {
                            auto gr = g.row(r);
                            double gs = 0.0;
                            for (double v : gr) gs += v;
                            auto dr = d.row(r);
                            auto lr = logp.row(r);
                            for (std::size_t c = 0; c < dr.size(); ++c)
                              dr[c] = gr[c] - std::exp(lr[c]) * gs;
                          }
                          accumulate(t, x, d);
                        });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    accumulate(t, x, Tensor(x.value().shape(), g[0]));
  });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

/// Sum of squares of all entries.
inline Var squared_norm(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor d = x.value();
    for (double& v : d.data()) v *= 2.0 * g[0];
    accumulate(t, x, d);
  });
}

/// Scalar sum of x * w (elementwise) for a constant weight tensor w.
inline Var weighted_sum(Var x, const Tensor& w) {
  require_same_shape(x.value(), w, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
  return x.tape->record(Tensor::scalar(s), {x}, [x, w](Tape& t, const Tensor& g) {
    Tensor d = w;
    for (double& v : d.data()) v *= g[0];
    accumulate(t, x, d);
  });
}

inline Var add_scalar_outputs(Var a, Var b, double b_weight = 1.0) {
  if (a.value().size() != 1 || b.value().size() != 1) {
    throw std::invalid_argument("add_scalar_outputs: shape mismatch " +
                                a.value().shape_string() + " vs " +
                                b.value().shape_string());
  }
  return a.tape->record(Tensor::scalar(a.value()[0] + b_weight * b.value()[0]),
                        {a, b}, [a, b, b_weight](Tape& t, const Tensor& g) {
                          accumulate(t, a, g);
                          accumulate(t, b, Tensor::scalar(b_weight * g[0]));
                        });
}

}  // namespace ad

/// Gradient of a scalar-valued `f(tape, x)` with respect to its input.
template <class F>
Tensor grad_wrt_input(F&& f, const Tensor& x) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var out = f(tape, xv);
  if (out.value().size() != 1) {
    throw std::invalid_argument("grad_wrt_input: function output is not scalar (" +
                                out.value().shape_string() + ")");
  }
  tape.backward(out);
  return tape.grad(xv);
}

}  // namespace laat
