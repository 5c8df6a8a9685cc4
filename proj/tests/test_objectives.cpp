#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "laat/encoder.hpp"
#include "laat/objectives.hpp"
#include "test_support.hpp"

using namespace laat;
using laat::testing::finite_difference;
using laat::testing::random_unit_rows;
using laat::testing::relative_error;

namespace {

using Vec = std::vector<std::size_t>;

Tensor identity_anchors(std::size_t n) {
  Tensor a = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return a;
}

Tensor row_of(const Tensor& m, std::size_t r) {
  Tensor out = Tensor::matrix(1, m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) = m(r, c);
  return out;
}

// Plain-loop oracles: no log-sum-exp shift, no shared helpers.
double naive_ace(const Tensor& z, const Tensor& a, const Vec& y, double tau) {
  double total = 0.0;
  for (std::size_t b = 0; b < z.rows(); ++b) {
    double denom = 0.0, num = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double logit = 0.0;
      for (std::size_t k = 0; k < z.cols(); ++k) logit += z(b, k) * a(i, k);
      denom += std::exp(logit / tau);
      if (i == y[b]) num = std::exp(logit / tau);
    }
    total += -std::log(num / denom);
  }
  return total / static_cast<double>(z.rows());
}

double naive_cw(const Tensor& z, const Tensor& a, const Vec& y, double kappa) {
  double total = 0.0;
  for (std::size_t b = 0; b < z.rows(); ++b) {
    double gt = 0.0, other = -1e300;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double logit = 0.0;
      for (std::size_t k = 0; k < z.cols(); ++k) logit += z(b, k) * a(i, k);
      if (i == y[b]) gt = logit;
      else if (logit > other) other = logit;
    }
    total += std::max(gt - other, -kappa);
  }
  return total / static_cast<double>(z.rows());
}

double naive_kl(const Tensor& u, const Tensor& w) {
  double total = 0.0;
  for (std::size_t b = 0; b < u.rows(); ++b) {
    double su = 0.0, sw = 0.0;
    for (std::size_t k = 0; k < u.cols(); ++k) {
      su += std::exp(u(b, k));
      sw += std::exp(w(b, k));
    }
    for (std::size_t k = 0; k < u.cols(); ++k) {
      const double p = std::exp(u(b, k)) / su, q = std::exp(w(b, k)) / sw;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(u.rows());
}

Vec random_labels(std::size_t b, std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  Vec y(b);
  for (auto& v : y) v = d(rng);
  return y;
}

}  // namespace

TEST(Ace, OrthogonalAnchorsFiveClasses) {
  const Tensor a = identity_anchors(5);
  const Vec y = {2};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 4.0));
  EXPECT_NEAR(ace_loss(row_of(a, 2), a, y).value, expected, 1e-12);
  EXPECT_NEAR(expected, 0.9048, 5e-5);
}

TEST(Ace, EquidistantFeatureGivesLogN) {
  // Anchors e_1..e_4 in 5-D, feature along e_5: every logit is zero.
  Tensor a = Tensor::matrix(4, 5);
  for (std::size_t i = 0; i < 4; ++i) a(i, i) = 1.0;
  Tensor z = Tensor::matrix(1, 5);
  z(0, 4) = 1.0;
  const Vec y = {1};
  EXPECT_NEAR(ace_loss(z, a, y).value, std::log(4.0), 1e-12);
}

TEST(Ace, MatchesNaiveOracle) {
  std::mt19937_64 rng(1);
  for (double tau : {1.0, 0.07, 0.5}) {
    const Tensor a = random_unit_rows(7, 6, rng);
    const Tensor z = random_unit_rows(9, 6, rng);
    const Vec y = random_labels(9, 7, rng);
    EXPECT_NEAR(ace_loss(z, a, y, tau).value, naive_ace(z, a, y, tau), 1e-10);
  }
}

TEST(Ace, RejectsBadInputs) {
  const Tensor a = identity_anchors(3);
  const Vec bad = {3};
  EXPECT_THROW(ace_loss(row_of(a, 0), a, bad), std::out_of_range);
  const Vec ok = {0};
  EXPECT_THROW(ace_loss(row_of(a, 0), a, ok, 0.0), std::invalid_argument);
  EXPECT_THROW(validate(LossKind{loss::Ace{-1.0}}), std::invalid_argument);
}

TEST(Ace, StrictlyDecreasingInGroundTruthLogit) {
  std::mt19937_64 rng(2);
  // Identity anchors turn feature coordinates into logits directly.
  const Tensor a = identity_anchors(6);
  for (int probe = 0; probe < 3; ++probe) {
    const Tensor base = laat::testing::random_matrix(1, 6, rng);
    const Vec y = {static_cast<std::size_t>(probe)};
    for (double tau : {1.0, 0.07}) {
      double prev = std::numeric_limits<double>::infinity();
      for (double bump = -1.0; bump <= 1.0; bump += 0.1) {
        Tensor z = base;
        z(0, y[0]) += bump;
        const double v = ace_loss(z, a, y, tau).value;
        EXPECT_LT(v, prev);
        prev = v;
      }
    }
  }
}

TEST(Ace, ArgmaxInvariantToConstantShiftOfLogits) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor logits = laat::testing::random_matrix(1, 8, rng);
    Tensor shifted = logits;
    const double c = std::uniform_real_distribution<double>(-5, 5)(rng);
    for (double& v : shifted.data()) v += c;
    auto argmax = [](const Tensor& t) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[best]) best = i;
      return best;
    };
    EXPECT_EQ(argmax(logits), argmax(shifted));
    // A-CE is itself shift invariant, so a correct argmax needs no absolute target.
    const Vec y = {argmax(logits)};
    const Tensor a = identity_anchors(8);
    EXPECT_NEAR(ace_loss(logits, a, y).value, ace_loss(shifted, a, y).value, 1e-12);
  }
}

TEST(AngularLosses, AtAnchorAndAntipode) {
  const Tensor a = identity_anchors(3);
  const Vec y = {1};
  const Tensor at = row_of(a, 1);
  Tensor anti = at;
  anti(0, 1) = -1.0;
  EXPECT_DOUBLE_EQ(cos_theta_loss(at, a, y).value, -1.0);
  EXPECT_DOUBLE_EQ(theta_loss(at, a, y).value, 0.0);
  EXPECT_DOUBLE_EQ(euclid_loss(at, a, y).value, 0.0);
  EXPECT_DOUBLE_EQ(cos_theta_loss(anti, a, y).value, 1.0);
  EXPECT_NEAR(theta_loss(anti, a, y).value, std::numbers::pi, 1e-12);
  EXPECT_DOUBLE_EQ(euclid_loss(anti, a, y).value, 4.0);
}

TEST(AngularLosses, EuclidIsTwoMinusTwoCos) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_unit_rows(5, 8, rng);
    const Tensor z = random_unit_rows(4, 8, rng);
    const Vec y = random_labels(4, 5, rng);
    EXPECT_NEAR(euclid_loss(z, a, y).value, 2.0 + 2.0 * cos_theta_loss(z, a, y).value, 1e-10);
  }
}

TEST(Smoothness, KnownValues) {
  const Tensor e1({1, 2}, std::vector<double>{1, 0});
  const Tensor e2({1, 2}, std::vector<double>{0, 1});
  const Tensor m1({1, 2}, std::vector<double>{-1, 0});
  EXPECT_DOUBLE_EQ(smoothness_loss(e1, e1).value, -1.0);
  EXPECT_DOUBLE_EQ(smoothness_loss(e1, e2).value, 0.0);
  EXPECT_DOUBLE_EQ(smoothness_loss(e1, m1).value, 1.0);
  EXPECT_THROW(smoothness_loss(e1, Tensor::matrix(2, 2)), std::invalid_argument);
}

TEST(Smoothness, SymmetricAndBounded) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor p = random_unit_rows(6, 5, rng), q = random_unit_rows(6, 5, rng);
    const double a = smoothness_loss(p, q).value, b = smoothness_loss(q, p).value;
    EXPECT_EQ(a, b);
    EXPECT_GE(a, -1.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(CwMargin, KnownValues) {
  const Tensor a = identity_anchors(4);
  const Vec y = {0};
  EXPECT_DOUBLE_EQ(cw_margin(row_of(a, 0), a, y).value, 1.0);
  Tensor mid = Tensor::matrix(1, 4);
  mid(0, 0) = mid(0, 3) = 1 / std::sqrt(2.0);
  EXPECT_NEAR(cw_margin(mid, a, y).value, 0.0, 1e-15);
  EXPECT_THROW(cw_margin(Tensor({1, 2}, std::vector<double>{1, 0}),
                         Tensor({1, 2}, std::vector<double>{1, 0}), y),
               std::invalid_argument);
}

TEST(CwMargin, MatchesLoopOracle) {
  std::mt19937_64 rng(6);
  for (double kappa : {0.0, 0.1, 5.0}) {
    const Tensor a = random_unit_rows(6, 7, rng);
    const Tensor z = random_unit_rows(10, 7, rng);
    const Vec y = random_labels(10, 6, rng);
    EXPECT_NEAR(cw_margin(z, a, y, kappa).value, naive_cw(z, a, y, kappa), 1e-10);
  }
}

TEST(Trades, KnownValues) {
  std::mt19937_64 rng(7);
  const Tensor u = laat::testing::random_matrix(3, 5, rng);
  const Vec y = {0, 4, 2};
  const double ce = ace_loss(u, identity_anchors(5), y).value;
  EXPECT_NEAR(trades_kl_loss(u, u, y, 6.0).value, ce, 1e-12);
  const Tensor w = laat::testing::random_matrix(3, 5, rng);
  EXPECT_NEAR(trades_kl_loss(u, w, y, 0.0).value, ce, 1e-12);
}

TEST(Trades, KlMatchesExplicitSum) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor u = laat::testing::random_matrix(4, 6, rng, -2, 2);
    const Tensor w = laat::testing::random_matrix(4, 6, rng, -2, 2);
    const Vec y = random_labels(4, 6, rng);
    const double ce = ace_loss(u, identity_anchors(6), y).value;
    EXPECT_NEAR(trades_kl_loss(u, w, y, 1.0).value - ce, naive_kl(u, w), 1e-10);
    EXPECT_NEAR(trades_attack_kl(u, w).value, naive_kl(u, w), 1e-10);
  }
}

TEST(Gradients, FeatureGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_unit_rows(5, 6, rng);
    const Tensor z = random_unit_rows(4, 6, rng);
    const Vec y = random_labels(4, 5, rng);
    auto check = [&](auto loss_fn) {
      const Tensor fd = finite_difference([&](const Tensor& x) { return loss_fn(x).value; }, z);
      EXPECT_LE(relative_error(loss_fn(z).grad, fd), 1e-5);
    };
    check([&](const Tensor& x) { return ace_loss(x, a, y); });
    check([&](const Tensor& x) { return ace_loss(x, a, y, 0.07); });
    check([&](const Tensor& x) { return cos_theta_loss(x, a, y); });
    check([&](const Tensor& x) { return theta_loss(x, a, y); });
    check([&](const Tensor& x) { return euclid_loss(x, a, y); });
    check([&](const Tensor& x) { return cw_margin(x, a, y); });

    const Tensor w = random_unit_rows(4, 6, rng);
    const auto s = smoothness_loss(z, w);
    EXPECT_LE(relative_error(s.grad_first, finite_difference(
        [&](const Tensor& x) { return smoothness_loss(x, w).value; }, z)), 1e-5);
    EXPECT_LE(relative_error(s.grad_second, finite_difference(
        [&](const Tensor& x) { return smoothness_loss(z, x).value; }, w)), 1e-5);

    const Tensor lu = laat::testing::random_matrix(4, 5, rng), lw = laat::testing::random_matrix(4, 5, rng);
    const auto t = trades_kl_loss(lu, lw, y, 6.0);
    EXPECT_LE(relative_error(t.grad_first, finite_difference(
        [&](const Tensor& x) { return trades_kl_loss(x, lw, y, 6.0).value; }, lu)), 1e-5);
    EXPECT_LE(relative_error(t.grad_second, finite_difference(
        [&](const Tensor& x) { return trades_kl_loss(lu, x, y, 6.0).value; }, lw)), 1e-5);
  }
}

TEST(Gradients, InputGradientsThroughEncoderMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  const Mlp net({8, {16}, 6}, 3);
  const Tensor a = random_unit_rows(5, 6, rng);
  const Tensor x = laat::testing::random_matrix(3, 8, rng, 0.0, 1.0);
  const Vec y = random_labels(3, 5, rng);
  for (const LossKind& kind : std::vector<LossKind>{loss::Ace{}, loss::Ace{0.07}, loss::CosTheta{},
                                                    loss::Theta{}, loss::Euclid{}, loss::Cw{}}) {
    auto f = [&](Tape& t, Var xv) { return ad::classification_loss(kind, net.forward(t, xv), a, y); };
    const Tensor fd = finite_difference(
        [&](const Tensor& xx) {
          Tape t;
          return f(t, t.constant(xx)).value()[0];
        },
        x);
    EXPECT_LE(relative_error(grad_wrt_input(f, x), fd), 1e-5) << loss_name(kind);
  }
}

TEST(Combined, AlphaZeroAndZeroPerturbation) {
  std::mt19937_64 rng(11);
  const Mlp net({8, {16}, 6}, 4);
  const Tensor a = random_unit_rows(5, 6, rng);
  const Tensor x = laat::testing::random_matrix(3, 8, rng, 0.0, 1.0);
  const Tensor xa = laat::testing::random_matrix(3, 8, rng, 0.0, 1.0);
  const Vec y = random_labels(3, 5, rng);

  Tape t;
  const double ace_adv = ace_loss(net.features(xa), a, y).value;
  const double a0 = combined_loss(t, t.constant(x), t.constant(xa), net, a, y, 0.0).value()[0];
  EXPECT_NEAR(a0, ace_adv, 1e-12);

  const double ace_clean = ace_loss(net.features(x), a, y).value;
  const double l3 = combined_loss(t, t.constant(x), t.constant(x), net, a, y, 3.0).value()[0];
  EXPECT_NEAR(l3 - ace_clean, 3.0 * -1.0, 1e-12);

  EXPECT_THROW(combined_loss(t, t.constant(x), t.constant(x), net, a, y, -1.0), std::invalid_argument);
}

TEST(Combined, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  Mlp net({5, {6}, 4}, 5);
  const Tensor a = random_unit_rows(3, 4, rng);
  const Tensor x = laat::testing::random_matrix(2, 5, rng, 0.0, 1.0);
  const Tensor xa = laat::testing::random_matrix(2, 5, rng, 0.0, 1.0);
  const Vec y = {0, 2};
  auto eval = [&](bool want_grads) {
    Tape t;
    std::vector<Var> p;
    for (const auto& w : net.parameters()) p.push_back(t.leaf(w));
    struct Bound {
      const Mlp& net;
      const std::vector<Var>& p;
      Var forward(Tape& tape, Var in) const { return net.forward_with(tape, in, p); }
      Tensor features(const Tensor& in) const { return net.features(in); }
      std::size_t output_dim() const { return net.output_dim(); }
      std::size_t input_dim() const { return net.input_dim(); }
    };
    static_assert(FeatureEncoder<Bound>);
    Var l = combined_loss(t, t.constant(x), t.constant(xa), Bound{net, p}, a, y, 3.0);
    std::vector<Tensor> grads;
    if (want_grads) {
      t.backward(l);
      for (Var v : p) grads.push_back(t.grad(v));
    }
    return std::make_pair(l.value()[0], grads);
  };
  const auto grads = eval(true).second;
  for (std::size_t k = 0; k < net.parameters().size(); ++k) {
    const Tensor orig = net.parameters()[k];
    const Tensor fd = finite_difference(
        [&](const Tensor& w) {
          net.parameters()[k] = w;
          const double v = eval(false).first;
          net.parameters()[k] = orig;
          return v;
        },
        orig);
    EXPECT_LE(relative_error(grads[k], fd), 1e-5) << "parameter " << k;
  }
}
