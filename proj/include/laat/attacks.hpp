// White-box l-infinity attacks on inputs in [0, 1]: FGSM and PGD-k, with the
// CW margin available as the PGD objective.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "laat/autodiff.hpp"
#include "laat/encoder.hpp"
#include "laat/objectives.hpp"

namespace laat {

struct AttackConfig {
  std::string name = "pgd";
  double epsilon = 8.0 / 255.0;
  int steps = 20;
  double step_size = 2.0 / 255.0;
  LossKind loss = loss::Ace{};
  bool random_start = false;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("attack epsilon must be >= 0");
    if (steps < 1) throw std::invalid_argument("attack steps must be >= 1");
    if (!(step_size >= 0.0)) throw std::invalid_argument("attack step size must be >= 0");
    if (step_size > 2.0 * epsilon) {
      throw std::invalid_argument("attack step size " + std::to_string(step_size) +
                                  " exceeds twice epsilon " + std::to_string(epsilon));
    }
    laat::validate(loss);
  }
};

namespace presets {

inline AttackConfig fgsm(double eps = 8.0 / 255.0) {
  return {"fgsm", eps, 1, eps, loss::Ace{}, false};
}
/// Training-time PGD: 7 steps of 2/255 from a random start.
inline AttackConfig pgd_train() { return {"pgd-train", 8.0 / 255.0, 7, 2.0 / 255.0, loss::Ace{}, true}; }
inline AttackConfig pgd20() { return {"pgd20", 8.0 / 255.0, 20, 2.0 / 255.0, loss::Ace{}, false}; }
inline AttackConfig pgd2_heavy() { return {"pgd2", 8.0 / 255.0, 2, 8.0 / 255.0, loss::Ace{}, true}; }
inline AttackConfig cw30() { return {"cw30", 8.0 / 255.0, 30, 0.8 / 255.0, loss::Cw{0.0}, false}; }

inline AttackConfig by_name(const std::string& name) {
  if (name == "fgsm") return fgsm();
  if (name == "pgd20") return pgd20();
  if (name == "cw30") return cw30();
  if (name == "pgd-train") return pgd_train();
  if (name == "pgd2") return pgd2_heavy();
  throw std::invalid_argument("unknown attack preset '" + name + "'");
}

}  // namespace presets

inline double sign_or_zero(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

/// Gradient of the quantity the attacker ascends. For CW that is the negated
/// margin; for TRADES it is KL(benign || adversarial) against the features
/// of `benign_x`.
template <FeatureEncoder E>
Tensor attack_gradient(const E& encoder, const Tensor& anchors, const Tensor& x,
                       Labels y, const LossKind& kind, const Tensor* benign_x = nullptr) {
  if (std::holds_alternative<loss::TradesKl>(kind)) {
    const Tensor zb = [&] {
      Tape t;
      return encoder.forward(t, t.constant(benign_x ? *benign_x : x)).value();
    }();
    const Tensor lb = matmul(zb, anchors, true);
    return grad_wrt_input(
        [&](Tape& t, Var xv) {
          Var z = encoder.forward(t, xv);
          const Tensor la = matmul(z.value(), anchors, true);
          LossGrad kl = trades_attack_kl(lb, la);
          kl.grad = matmul(kl.grad, anchors);
          return ad::record_loss(z, std::move(kl));
        },
        x);
  }
  const bool negate = std::holds_alternative<loss::Cw>(kind);
  return grad_wrt_input(
      [&](Tape& t, Var xv) {
        Var l = ad::classification_loss(kind, encoder.forward(t, xv), anchors, y);
        return negate ? ad::scale(l, -1.0) : l;
      },
      x);
}

inline void check_input_range(const Tensor& x) {
  for (double v : x.data())
    if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error("attack input outside [0, 1]");
}

/// Signed-gradient ascent projected onto the epsilon ball around `x0`
/// intersected with [0, 1]. `grad(x)` returns the ascent gradient at x.
template <class GradFn>
Tensor pgd_with_gradient(GradFn&& grad, const Tensor& x0, const AttackConfig& cfg,
                         std::mt19937_64& rng) {
  cfg.validate();
  check_input_range(x0);
  Tensor x = x0;
  if (cfg.random_start && cfg.epsilon > 0.0) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (double& v : x.data()) v += u(rng);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], 0.0, 1.0);
  }
  for (int s = 0; s < cfg.steps; ++s) {
    const Tensor g = grad(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double stepped = x[i] + cfg.step_size * sign_or_zero(g[i]);
      x[i] = std::clamp(std::clamp(stepped, x0[i] - cfg.epsilon, x0[i] + cfg.epsilon),
                        0.0, 1.0);
    }
  }
  return x;
}

template <FeatureEncoder E>
Tensor pgd(const E& encoder, const Tensor& anchors, const Tensor& x, Labels y,
           const AttackConfig& cfg, std::mt19937_64& rng) {
  if (cfg.epsilon == 0.0) return x;
  return pgd_with_gradient(
      [&](const Tensor& xc) { return attack_gradient(encoder, anchors, xc, y, cfg.loss, &x); },
      x, cfg, rng);
}

template <FeatureEncoder E>
Tensor pgd(const E& encoder, const Tensor& anchors, const Tensor& x, Labels y,
           const AttackConfig& cfg) {
  std::mt19937_64 rng(0);
  return pgd(encoder, anchors, x, y, cfg, rng);
}

/// x + epsilon * sign(grad L1), clipped to [0, 1].
template <FeatureEncoder E>
Tensor fgsm(const E& encoder, const Tensor& anchors, const Tensor& x, Labels y,
            double epsilon, const LossKind& kind = loss::Ace{}) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("attack epsilon must be >= 0");
  check_input_range(x);
  if (epsilon == 0.0) return x;
  const Tensor g = attack_gradient(encoder, anchors, x, y, kind);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(x[i] + epsilon * sign_or_zero(g[i]), 0.0, 1.0);
  return out;
}

}  // namespace laat
