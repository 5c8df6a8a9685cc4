// Supervision objectives over l2-normalized features and fixed anchors.
//
// Each loss has a plain form returning the value together with its analytic
// gradient, and a tape form that records it as a single node so it composes
// with the encoder.
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "laat/anchor_geometry.hpp"
#include "laat/autodiff.hpp"
#include "laat/tensor.hpp"

namespace laat {

using Labels = std::span<const std::size_t>;

namespace loss {
struct Ace {
  double tau = 1.0;
};
struct CosTheta {};
struct Theta {};
struct Euclid {};
struct Cw {
  double kappa = 0.0;
};
struct TradesKl {
  double lambda_inv = 6.0;
};
}  // namespace loss

using LossKind = std::variant<loss::Ace, loss::CosTheta, loss::Theta,
                              loss::Euclid, loss::Cw, loss::TradesKl>;

inline std::string loss_name(const LossKind& k) {
  struct V {
    std::string operator()(const loss::Ace&) const { return "ace"; }
    std::string operator()(const loss::CosTheta&) const { return "cos_theta"; }
    std::string operator()(const loss::Theta&) const { return "theta"; }
    std::string operator()(const loss::Euclid&) const { return "euclid"; }
    std::string operator()(const loss::Cw&) const { return "cw"; }
    std::string operator()(const loss::TradesKl&) const { return "trades_kl"; }
  };
  return std::visit(V{}, k);
}

inline void validate(const LossKind& k) {
  if (auto* a = std::get_if<loss::Ace>(&k); a && !(a->tau > 0.0)) {
    throw std::invalid_argument("ace temperature must be positive");
  }
  if (auto* t = std::get_if<loss::TradesKl>(&k); t && t->lambda_inv < 0.0) {
    throw std::invalid_argument("trades 1/lambda must be non-negative");
  }
}

struct LossGrad {
  double value = 0.0;
  Tensor grad;  // w.r.t. the (first) input
};

struct PairLossGrad {
  double value = 0.0;
  Tensor grad_first;
  Tensor grad_second;
};

namespace detail {

inline void check_inputs(const Tensor& z, const Tensor& anchors, Labels y) {
  require_matrix(z, "loss");
  require_matrix(anchors, "loss");
  if (z.cols() != anchors.cols()) {
    throw std::invalid_argument("loss: feature shape " + z.shape_string() +
                                " does not match anchors " +
                                anchors.shape_string());
  }
  if (y.size() != z.rows()) {
    throw std::invalid_argument("loss: " + std::to_string(y.size()) +
                                " labels for " + std::to_string(z.rows()) +
                                " features");
  }
  for (std::size_t l : y) {
    if (l >= anchors.rows()) {
      throw std::out_of_range("label " + std::to_string(l) + " out of range [0, " +
                              std::to_string(anchors.rows()) + ")");
    }
  }
}

inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Softmax cross-entropy of logit rows; gradient w.r.t. logits.
inline LossGrad softmax_ce(const Tensor& logits, Labels y) {
  LossGrad out{0.0, logits};
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const double lse = log_sum_exp(logits.row(b));
    out.value += lse - logits(b, y[b]);
    auto g = out.grad.row(b);
    for (double& v : g) v = std::exp(v - lse) * inv_b;
    g[y[b]] -= inv_b;
  }
  out.value *= inv_b;
  return out;
}

}  // namespace detail

/// Mean of -log softmax(z . A^T / tau)[y].
inline LossGrad ace_loss(const Tensor& z, const Tensor& anchors, Labels y,
                         double tau = 1.0) {
  detail::check_inputs(z, anchors, y);
  if (!(tau > 0.0)) throw std::invalid_argument("ace temperature must be positive");
  Tensor logits = matmul(z, anchors, true);
  for (double& v : logits.data()) v /= tau;
  LossGrad ce = detail::softmax_ce(logits, y);
  Tensor dz = matmul(ce.grad, anchors);
  for (double& v : dz.data()) v /= tau;
  return {ce.value, std::move(dz)};
}

/// Mean of -<z, a_y>.
inline LossGrad cos_theta_loss(const Tensor& z, const Tensor& anchors, Labels y) {
  detail::check_inputs(z, anchors, y);
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  LossGrad out{0.0, Tensor(z.shape())};
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto a = anchors.row(y[b]);
    out.value -= dot(z.row(b), a);
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = -a[c] * inv_b;
  }
  out.value *= inv_b;
  return out;
}

/// Mean of arccos<z, a_y>.
inline LossGrad theta_loss(const Tensor& z, const Tensor& anchors, Labels y) {
  detail::check_inputs(z, anchors, y);
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  LossGrad out{0.0, Tensor(z.shape())};
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto a = anchors.row(y[b]);
    const double c = std::clamp(dot(z.row(b), a), -1.0, 1.0);
    out.value += std::acos(c);
    // d acos(c)/dc is unbounded at |c| = 1; floor the denominator there.
    const double d = -1.0 / std::sqrt(std::max(1.0 - c * c, 1e-12));
    auto g = out.grad.row(b);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = d * a[k] * inv_b;
  }
  out.value *= inv_b;
  return out;
}

/// Mean of ||z - a_y||^2.
inline LossGrad euclid_loss(const Tensor& z, const Tensor& anchors, Labels y) {
  detail::check_inputs(z, anchors, y);
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  LossGrad out{0.0, Tensor(z.shape())};
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto a = anchors.row(y[b]);
    auto zr = z.row(b);
    auto g = out.grad.row(b);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double d = zr[k] - a[k];
      out.value += d * d;
      g[k] = 2.0 * d * inv_b;
    }
  }
  out.value *= inv_b;
  return out;
}

/// Mean of -<benign, adv> over rows.
inline PairLossGrad smoothness_loss(const Tensor& benign, const Tensor& adv) {
  require_matrix(benign, "smoothness_loss");
  require_same_shape(benign, adv, "smoothness_loss");
  const double inv_b = 1.0 / static_cast<double>(benign.rows());
  PairLossGrad out{0.0, adv, benign};
  for (double& v : out.grad_first.data()) v *= -inv_b;
  for (double& v : out.grad_second.data()) v *= -inv_b;
  for (std::size_t b = 0; b < benign.rows(); ++b)
    out.value -= dot(benign.row(b), adv.row(b));
  out.value *= inv_b;
  return out;
}

/// Mean of max(z.a_y - max_{i != y} z.a_i, -kappa). Ties on the runner-up
/// resolve to the lowest index.
inline LossGrad cw_margin(const Tensor& z, const Tensor& anchors, Labels y,
                          double kappa = 0.0) {
  detail::check_inputs(z, anchors, y);
  if (anchors.rows() < 2) throw std::invalid_argument("cw margin needs at least two anchors");
  const double inv_b = 1.0 / static_cast<double>(z.rows());
  const Tensor logits = matmul(z, anchors, true);
  LossGrad out{0.0, Tensor(z.shape())};
  for (std::size_t b = 0; b < z.rows(); ++b) {
    std::size_t best = y[b] == 0 ? 1 : 0;
    for (std::size_t i = 0; i < anchors.rows(); ++i)
      if (i != y[b] && logits(b, i) > logits(b, best)) best = i;
    const double margin = logits(b, y[b]) - logits(b, best);
    if (margin > -kappa) {
      out.value += margin;
      auto g = out.grad.row(b);
      auto ay = anchors.row(y[b]);
      auto ab = anchors.row(best);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] = (ay[k] - ab[k]) * inv_b;
    } else {
      out.value += -kappa;
    }
  }
  out.value *= inv_b;
  return out;
}

/// CE(benign) + lambda_inv * KL(softmax(benign) || softmax(adv)), batch mean.
inline PairLossGrad trades_kl_loss(const Tensor& benign_logits,
                                   const Tensor& adv_logits, Labels y,
                                   double lambda_inv) {
  require_matrix(benign_logits, "trades_kl_loss");
  require_same_shape(benign_logits, adv_logits, "trades_kl_loss");
  if (y.size() != benign_logits.rows()) {
    throw std::invalid_argument("trades_kl_loss: label count mismatch");
  }
  for (std::size_t l : y)
    if (l >= benign_logits.cols()) {
      throw std::out_of_range("label " + std::to_string(l) + " out of range");
    }
  LossGrad ce = detail::softmax_ce(benign_logits, y);
  PairLossGrad out{ce.value, std::move(ce.grad), Tensor(adv_logits.shape())};
  const double inv_b = 1.0 / static_cast<double>(benign_logits.rows());
  double kl_total = 0.0;
  for (std::size_t b = 0; b < benign_logits.rows(); ++b) {
    auto u = benign_logits.row(b);
    auto w = adv_logits.row(b);
    const double lse_u = detail::log_sum_exp(u);
    const double lse_w = detail::log_sum_exp(w);
    double kl = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
      const double logp = u[k] - lse_u, logq = w[k] - lse_w;
      kl += std::exp(logp) * (logp - logq);
    }
    kl_total += kl;
    auto gu = out.grad_first.row(b);
    auto gw = out.grad_second.row(b);
    for (std::size_t k = 0; k < u.size(); ++k) {
      const double logp = u[k] - lse_u, logq = w[k] - lse_w;
      const double p = std::exp(logp), q = std::exp(logq);
      gu[k] += lambda_inv * inv_b * p * (logp - logq - kl);
      gw[k] = lambda_inv * inv_b * (q - p);
    }
  }
  out.value += lambda_inv * kl_total * inv_b;
  return out;
}

/// KL(softmax(benign) || softmax(adv)) alone, used to drive TRADES attacks.
inline LossGrad trades_attack_kl(const Tensor& benign_logits,
                                 const Tensor& adv_logits) {
  std::vector<std::size_t> dummy(benign_logits.rows(), 0);
  PairLossGrad full = trades_kl_loss(benign_logits, adv_logits, dummy, 1.0);
  LossGrad ce = detail::softmax_ce(benign_logits, dummy);
  return {full.value - ce.value, std::move(full.grad_second)};
}

// ---- tape forms ---------------------------------------------------------

namespace ad {

inline Var record_loss(Var z, LossGrad lg) {
  Tensor value = Tensor::scalar(lg.value);
  return z.tape->record(std::move(value), {z},
                        [z, g = std::move(lg.grad)](Tape& t, const Tensor& go) {
                          Tensor d = g;
                          for (double& v : d.data()) v *= go[0];
                          accumulate(t, z, d);
                        });
}

inline Var record_pair_loss(Var a, Var b, PairLossGrad lg) {
  return a.tape->record(
      Tensor::scalar(lg.value), {a, b},
      [a, b, ga = std::move(lg.grad_first), gb = std::move(lg.grad_second)](
          Tape& t, const Tensor& go) {
        Tensor da = ga, db = gb;
        for (double& v : da.data()) v *= go[0];
        for (double& v : db.data()) v *= go[0];
        accumulate(t, a, da);
        accumulate(t, b, db);
      });
}

inline Var ace_loss(Var z, const Tensor& anchors, Labels y, double tau = 1.0) {
  return record_loss(z, laat::ace_loss(z.value(), anchors, y, tau));
}
inline Var cos_theta_loss(Var z, const Tensor& anchors, Labels y) {
  return record_loss(z, laat::cos_theta_loss(z.value(), anchors, y));
}
inline Var theta_loss(Var z, const Tensor& anchors, Labels y) {
  return record_loss(z, laat::theta_loss(z.value(), anchors, y));
}
inline Var euclid_loss(Var z, const Tensor& anchors, Labels y) {
  return record_loss(z, laat::euclid_loss(z.value(), anchors, y));
}
inline Var cw_margin(Var z, const Tensor& anchors, Labels y, double kappa = 0.0) {
  return record_loss(z, laat::cw_margin(z.value(), anchors, y, kappa));
}
inline Var smoothness_loss(Var benign, Var adv) {
  return record_pair_loss(benign, adv,
                          laat::smoothness_loss(benign.value(), adv.value()));
}

/// TRADES objective on cosine logits of benign and adversarial features.
inline Var trades_kl_loss(Var benign, Var adv, const Tensor& anchors, Labels y,
                          double lambda_inv) {
  detail::check_inputs(benign.value(), anchors, y);
  const Tensor lb = laat::matmul(benign.value(), anchors, true);
  const Tensor la = laat::matmul(adv.value(), anchors, true);
  PairLossGrad lg = laat::trades_kl_loss(lb, la, y, lambda_inv);
  lg.grad_first = laat::matmul(lg.grad_first, anchors);
  lg.grad_second = laat::matmul(lg.grad_second, anchors);
  return record_pair_loss(benign, adv, std::move(lg));
}

/// Single-input supervision objective for `kind`. The CW entry is the
/// margin itself; TRADES needs benign features and is rejected here.
inline Var classification_loss(const LossKind& kind, Var z, const Tensor& anchors,
                               Labels y) {
  struct V {
    Var z;
    const Tensor& a;
    Labels y;
    Var operator()(const loss::Ace& k) const { return ace_loss(z, a, y, k.tau); }
    Var operator()(const loss::CosTheta&) const { return cos_theta_loss(z, a, y); }
    Var operator()(const loss::Theta&) const { return theta_loss(z, a, y); }
    Var operator()(const loss::Euclid&) const { return euclid_loss(z, a, y); }
    Var operator()(const loss::Cw& k) const { return cw_margin(z, a, y, k.kappa); }
    Var operator()(const loss::TradesKl&) const {
      throw std::invalid_argument("trades objective needs benign features");
    }
  };
  return std::visit(V{z, anchors, y}, kind);
}

}  // namespace ad
}  // namespace laat
