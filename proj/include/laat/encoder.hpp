// Feed-forward feature encoder: input -> [Linear, ReLU]* -> Linear -> l2 norm.
#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "laat/autodiff.hpp"
#include "laat/objectives.hpp"
#include "laat/tensor.hpp"

namespace laat {

/// Anything that maps an input batch on a tape to unit-norm feature rows.
template <class E>
concept FeatureEncoder = requires(const E& e, Tape& t, Var x) {
  { e.forward(t, x) } -> std::same_as<Var>;
  { e.output_dim() } -> std::convertible_to<std::size_t>;
};

struct MlpArchitecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {128, 128};
  std::size_t output_dim = 0;
};

class Mlp {
 public:
  Mlp() = default;

  /// He-initialized weights, zero biases.
  Mlp(MlpArchitecture arch, std::uint64_t seed) : arch_(std::move(arch)), seed_(seed) {
    if (arch_.input_dim == 0 || arch_.output_dim == 0) {
      throw std::invalid_argument("mlp: input and output dims must be positive");
    }
    std::mt19937_64 rng(seed);
    std::size_t fan_in = arch_.input_dim;
    auto add_layer = [&](std::size_t fan_out) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      Tensor w = Tensor::matrix(fan_in, fan_out);
      for (double& v : w.data()) v = dist(rng);
      params_.push_back(std::move(w));
      params_.push_back(Tensor({1, fan_out}, 0.0));
      fan_in = fan_out;
    };
    for (std::size_t h : arch_.hidden) add_layer(h);
    add_layer(arch_.output_dim);
  }

  const MlpArchitecture& architecture() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t input_dim() const { return arch_.input_dim; }
  std::size_t output_dim() const { return arch_.output_dim; }

  /// Weights and biases interleaved: W0, b0, W1, b1, ...
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// Forward pass with constant parameters.
  Var forward(Tape& tape, Var x) const {
    std::vector<Var> p;
    for (const auto& t : params_) p.push_back(tape.constant(t));
    return forward_with(tape, x, p);
  }

  /// Forward pass on caller-provided parameter vars (for training).
  Var forward_with(Tape& tape, Var x, const std::vector<Var>& p) const {
    (void)tape;
    if (x.value().rank() != 2 || x.value().cols() != arch_.input_dim) {
      throw std::invalid_argument("mlp: input shape " + x.value().shape_string() +
                                  " does not match input dim " +
                                  std::to_string(arch_.input_dim));
    }
    Var h = x;
    const std::size_t layers = p.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      h = ad::add_bias(ad::matmul(h, p[2 * l]), p[2 * l + 1]);
      if (l + 1 < layers) h = ad::relu(h);
    }
    return ad::l2_normalize_rows(h);
  }

  /// Unit-norm features for a batch of inputs.
  Tensor features(const Tensor& x) const {
    Tape tape;
    return forward(tape, tape.constant(x)).value();
  }

 private:
  MlpArchitecture arch_;
  std::uint64_t seed_ = 0;
  std::vector<Tensor> params_;
};

static_assert(FeatureEncoder<Mlp>);

/// L1 on adversarial features plus alpha times the smoothness term between
/// benign and adversarial features, both through the same encoder.
template <FeatureEncoder E>
Var combined_loss(Tape& tape, Var benign_x, Var adv_x, const E& encoder,
                  const Tensor& anchors, Labels y, double alpha,
                  const LossKind& kind = loss::Ace{}) {
  if (alpha < 0.0) throw std::invalid_argument("alpha must be non-negative");
  Var z_adv = encoder.forward(tape, adv_x);
  Var l1 = ad::classification_loss(kind, z_adv, anchors, y);
  if (alpha == 0.0) return l1;
  Var z_benign = encoder.forward(tape, benign_x);
  return ad::add_scalar_outputs(l1, ad::smoothness_loss(z_benign, z_adv), alpha);
}

}  // namespace laat
