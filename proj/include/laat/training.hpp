// Adversarial training of an Mlp encoder against frozen anchors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "laat/attacks.hpp"
#include "laat/dataset.hpp"
#include "laat/encoder.hpp"
#include "laat/evaluation.hpp"
#include "laat/objectives.hpp"

namespace laat {

struct TrainConfig {
  int epochs = 200;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<int> lr_decay_epochs = {100, 150};
  double lr_decay_factor = 0.1;
  double alpha = 3.0;  // smoothness weight
  std::size_t batch_size = 128;
  // The attack objective is always the classification loss below (or the
  // TRADES KL term); `attack.loss` is overridden at training time.
  AttackConfig attack = presets::pgd_train();
  LossKind loss = loss::Ace{};
  std::uint64_t seed = 0;

  // Per-epoch curve evaluation on the test split.
  bool track_curve = true;
  AttackConfig curve_attack = presets::pgd20();
  std::size_t curve_samples = 256;  // 0 = whole test split

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
    if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    attack.validate();
    laat::validate(loss);
  }
};

/// Learning rate in effect during (1-based) `epoch`: the base rate times the
/// decay factor once for every milestone already passed.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int m : cfg.lr_decay_epochs)
    if (epoch > m) lr *= cfg.lr_decay_factor;
  return lr;
}

/// SGD with heavy-ball momentum; weight decay enters as an L2 term on the
/// gradient before the momentum buffer.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("sgd: parameter/gradient count mismatch");
    if (buffers_.empty()) {
      for (const auto& p : params) buffers_.emplace_back(p.shape());
      first_ = true;
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      require_same_shape(params[k], grads[k], "sgd");
      auto& w = params[k].data();
      const auto& g = grads[k].data();
      auto& buf = buffers_[k].data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = g[i] + weight_decay_ * w[i];
        buf[i] = first_ ? d : momentum_ * buf[i] + d;
        w[i] -= lr * buf[i];
      }
    }
    first_ = false;
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> buffers_;
  bool first_ = true;
};

struct CurvePoint {
  int epoch = 0;
  double train_loss = 0.0;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
};

using LearningCurve = std::vector<CurvePoint>;

class TrainingError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mlp with its parameters bound to tape leaves.
struct BoundMlp {
  const Mlp* model;
  std::vector<Var> params;

  Var forward(Tape& t, Var x) const { return model->forward_with(t, x, params); }
  std::size_t output_dim() const { return model->output_dim(); }
};

/// One optimisation step's loss on a batch: L1 on adversarial features plus
/// alpha times smoothness, or the TRADES objective for TradesKl. Gradients
/// land in `grads` (same layout as the encoder parameters).
inline double batch_loss_and_grads(const Mlp& encoder, const Tensor& xb, const Tensor& xadv,
                                   const Tensor& anchors, Labels yb, const TrainConfig& cfg,
                                   std::vector<Tensor>& grads) {
  Tape tape;
  BoundMlp bound{&encoder, {}};
  for (const auto& p : encoder.parameters()) bound.params.push_back(tape.leaf(p));
  Var xb_v = tape.constant(xb);
  Var xa_v = tape.constant(xadv);
  Var total;
  if (auto* tr = std::get_if<loss::TradesKl>(&cfg.loss)) {
    Var zb = bound.forward(tape, xb_v);
    Var za = bound.forward(tape, xa_v);
    total = ad::trades_kl_loss(zb, za, anchors, yb, tr->lambda_inv);
  } else {
    total = combined_loss(tape, xb_v, xa_v, bound, anchors, yb, cfg.alpha, cfg.loss);
  }
  tape.backward(total);
  grads.clear();
  for (Var p : bound.params) grads.push_back(tape.grad(p));
  return total.value()[0];
}

/// Trains `encoder` in place. The dataset's labels must all be anchor labels;
/// anchors stay fixed. Deterministic for a given config and initial encoder.
inline LearningCurve train(Mlp& encoder, const Dataset& data, const AnchorSet& anchors,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (encoder.output_dim() != anchors.dim()) {
    throw std::invalid_argument("encoder output dimension does not match anchors");
  }
  if (encoder.input_dim() != data.dim) {
    throw std::invalid_argument("encoder input dimension does not match data");
  }
  const Split train_split = align_to_anchors(data.train, data.labels, anchors);
  Split curve_split = align_to_anchors(data.test.size() ? data.test : data.train, data.labels, anchors);
  if (cfg.curve_samples && curve_split.size() > cfg.curve_samples) {
    // Evenly strided subset keeps every class represented.
    std::vector<std::size_t> rows;
    const double stride = double(curve_split.size()) / double(cfg.curve_samples);
    for (std::size_t i = 0; i < cfg.curve_samples; ++i) rows.push_back(std::size_t(i * stride));
    Split sub{curve_split.x.gather_rows(rows), {}};
    for (std::size_t r : rows) sub.y.push_back(curve_split.y[r]);
    curve_split = std::move(sub);
  }

  const Tensor& a = anchors.vectors();
  AttackConfig attack = cfg.attack;
  attack.loss = cfg.loss;
  std::mt19937_64 rng(cfg.seed);
  SgdMomentum opt(cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Tensor> grads;
  LearningCurve curve;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + long(start), order.begin() + long(end));
      const Tensor xb = train_split.x.gather_rows(idx);
      std::vector<std::size_t> yb;
      for (std::size_t i : idx) yb.push_back(train_split.y[i]);

      const Tensor xadv = attack.epsilon > 0.0 ? pgd(encoder, a, xb, yb, attack, rng) : xb;
      const double l = batch_loss_and_grads(encoder, xb, xadv, a, yb, cfg, grads);
      bool finite = std::isfinite(l);
      for (const auto& g : grads)
        for (double v : g.data()) finite = finite && std::isfinite(v);
      if (!finite) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << ", batch " << batches << " (lr " << lr << ")";
        throw TrainingError(os.str());
      }
      opt.step(encoder.parameters(), grads, lr);
      loss_sum += l;
      ++batches;
    }
    CurvePoint pt{epoch, batches ? loss_sum / double(batches) : 0.0, 0.0, 0.0};
    if (cfg.track_curve && curve_split.size()) {
      pt.clean_acc = clean_accuracy(encoder, a, curve_split.x, curve_split.y);
      std::mt19937_64 eval_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
      pt.robust_acc = robust_accuracy(encoder, a, curve_split.x, curve_split.y,
                                      cfg.curve_attack, eval_rng);
    }
    curve.push_back(pt);
  }
  return curve;
}

}  // namespace laat
