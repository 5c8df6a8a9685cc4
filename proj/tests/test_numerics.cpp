#include <gtest/gtest.h>

#include <random>

#include "laat/autodiff.hpp"
#include "laat/encoder.hpp"
#include "laat/objectives.hpp"
#include "test_support.hpp"

using namespace laat;
using laat::testing::finite_difference;
using laat::testing::random_matrix;
using laat::testing::relative_error;

namespace {

/// Gradient of sum(op(x) * w) w.r.t. x through the tape.
template <class Op>
Tensor tape_grad(Op op, const Tensor& x, const Tensor& w) {
  return grad_wrt_input([&](Tape&, Var xv) { return ad::weighted_sum(op(xv), w); }, x);
}

template <class Op>
double tape_value(Op op, const Tensor& x, const Tensor& w) {
  Tape t;
  return ad::weighted_sum(op(t.leaf(x)), w).value()[0];
}

template <class Op>
void expect_matches_fd(Op op, const Tensor& x, const Tensor& w, double tol = 1e-5) {
  const Tensor g = tape_grad(op, x, w);
  const Tensor fd = finite_difference([&](const Tensor& xx) { return tape_value(op, xx, w); }, x);
  EXPECT_LE(relative_error(g, fd), tol);
}

}  // namespace

TEST(Numerics, L2NormalizeKnownValue) {
  Tape t;
  Var z = ad::l2_normalize_rows(t.constant(Tensor({1, 2}, std::vector<double>{3, 4})));
  EXPECT_DOUBLE_EQ(z.value()[0], 0.6);
  EXPECT_DOUBLE_EQ(z.value()[1], 0.8);
}

TEST(Numerics, ReluBackwardIsZeroForNegativeInputs) {
  const Tensor x({1, 3}, std::vector<double>{-2.0, -0.5, 1.5});
  const Tensor g = grad_wrt_input([](Tape&, Var v) { return ad::sum(ad::relu(v)); }, x);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(Numerics, MatmulGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  const Tensor a = random_matrix(5, 7, rng);
  const Tensor b = random_matrix(7, 3, rng);
  const Tensor w = random_matrix(5, 3, rng);
  auto loss = [&](const Tensor& aa, const Tensor& bb) {
    Tape t;
    return ad::weighted_sum(ad::matmul(t.leaf(aa), t.leaf(bb)), w).value()[0];
  };
  Tape t;
  Var av = t.leaf(a), bv = t.leaf(b);
  t.backward(ad::weighted_sum(ad::matmul(av, bv), w));
  const Tensor fa = finite_difference([&](const Tensor& x) { return loss(x, b); }, a);
  const Tensor fb = finite_difference([&](const Tensor& x) { return loss(a, x); }, b);
  EXPECT_LE(laat::testing::max_abs_diff(t.grad(av), fa), 1e-6);
  EXPECT_LE(laat::testing::max_abs_diff(t.grad(bv), fb), 1e-6);
}

TEST(Numerics, ShapeMismatchReportsBothShapes) {
  Tape t;
  Var a = t.constant(Tensor::matrix(2, 3));
  Var b = t.constant(Tensor::matrix(4, 5));
  try {
    ad::matmul(a, b);
    FAIL() << "expected an exception";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
}

TEST(Numerics, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_matrix(4, 6, rng);
    const Tensor w = random_matrix(4, 6, rng);
    const Tensor other = random_matrix(4, 6, rng);
    const Tensor right = random_matrix(6, 5, rng);
    const Tensor w5 = random_matrix(4, 5, rng);
    const Tensor bias = random_matrix(1, 6, rng);

    expect_matches_fd([&](Var v) { return ad::matmul(v, v.tape->constant(right)); }, x, w5);
    expect_matches_fd([&](Var v) { return ad::add(v, v.tape->constant(other)); }, x, w);
    expect_matches_fd([&](Var v) { return ad::add_bias(v, v.tape->constant(bias)); }, x, w);
    expect_matches_fd([&](Var v) { return ad::add_bias(v.tape->constant(x), ad::scale(v, 1.0)); },
                      bias, w);
    expect_matches_fd([&](Var v) { return ad::scale(v, -1.7); }, x, w);
    expect_matches_fd([&](Var v) { return ad::l2_normalize_rows(v); }, x, w);
    expect_matches_fd([&](Var v) { return ad::log_softmax_rows(v); }, x, w);

    // ReLU: keep inputs away from the kink so central differences are valid.
    Tensor xr = x;
    for (double& v : xr.data()) v += v >= 0 ? 0.05 : -0.05;
    expect_matches_fd([&](Var v) { return ad::relu(v); }, xr, w);

    const Tensor s = Tensor::scalar(1.0);
    expect_matches_fd([&](Var v) { return ad::sum(v); }, x, s);
    expect_matches_fd([&](Var v) { return ad::mean(v); }, x, s);
    expect_matches_fd([&](Var v) { return ad::squared_norm(v); }, x, s);
  }
}

TEST(Numerics, NormalizationJacobianAnnihilatesRadialDirection) {
  std::mt19937_64 rng(3);
  const Tensor x = random_matrix(1, 8, rng);
  Tape t0;
  const Tensor z = ad::l2_normalize_rows(t0.constant(x)).value();
  EXPECT_NEAR(norm2(z.row(0)), 1.0, 1e-9);
  for (std::size_t i = 0; i < 8; ++i) {
    Tensor e = Tensor::matrix(1, 8);
    e[i] = 1.0;
    const Tensor row = tape_grad([](Var v) { return ad::l2_normalize_rows(v); }, x, e);
    EXPECT_NEAR(dot(row.row(0), x.row(0)), 0.0, 1e-8);
  }
}

TEST(Numerics, GradWrtInputOfSquaredNormIsTwiceInput) {
  std::mt19937_64 rng(4);
  const Tensor x = random_matrix(3, 4, rng);
  const Tensor g = grad_wrt_input([](Tape&, Var v) { return ad::squared_norm(v); }, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * x[i]);
}

TEST(Numerics, GradWrtInputOfConstantIsZero) {
  const Tensor x = Tensor::matrix(2, 2, 0.3);
  const Tensor g = grad_wrt_input(
      [](Tape& t, Var) { return t.constant(Tensor::scalar(5.0)); }, x);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Numerics, GradWrtInputRejectsNonScalarOutput) {
  const Tensor x = Tensor::matrix(2, 2, 0.3);
  EXPECT_THROW(grad_wrt_input([](Tape&, Var v) { return ad::relu(v); }, x), std::invalid_argument);
}

TEST(Numerics, AceLossInputGradientOfOneLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Mlp net({6, {}, 4}, 11);
  const Tensor anchors = laat::testing::random_unit_rows(3, 4, rng);
  const std::vector<std::size_t> y = {0, 2};
  const Tensor x = random_matrix(2, 6, rng, 0.0, 1.0);
  auto f = [&](Tape& t, Var xv) { return ad::ace_loss(net.forward(t, xv), anchors, y); };
  const Tensor g = grad_wrt_input(f, x);
  const Tensor fd = finite_difference(
      [&](const Tensor& xx) {
        Tape t;
        return f(t, t.constant(xx)).value()[0];
      },
      x);
  EXPECT_LE(relative_error(g, fd), 1e-5);
}

TEST(Numerics, ForwardAndBackwardAreDeterministic) {
  auto run = [] {
    const Mlp net({5, {7, 7}, 3}, 42);
    std::mt19937_64 rng(9);
    const Tensor x = random_matrix(4, 5, rng, 0.0, 1.0);
    const Tensor anchors = laat::testing::random_unit_rows(3, 3, rng);
    const std::vector<std::size_t> y = {0, 1, 2, 0};
    Tape t;
    std::vector<Var> p;
    for (const auto& w : net.parameters()) p.push_back(t.leaf(w));
    Var loss = ad::ace_loss(net.forward_with(t, t.constant(x), p), anchors, y);
    t.backward(loss);
    std::vector<double> out = {loss.value()[0]};
    for (Var v : p)
      for (double g : t.grad(v).data()) out.push_back(g);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Numerics, ZeroRowNormalizesToZeroWithFiniteGradient) {
  const Tensor x({2, 2}, std::vector<double>{0, 0, 3, 4});
  Tape t;
  Var xv = t.leaf(x);
  Var z = ad::l2_normalize_rows(xv);
  EXPECT_EQ(z.value()[0], 0.0);
  EXPECT_EQ(z.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(z.value()[2], 0.6);
  t.backward(ad::sum(z));
  for (double g : t.grad(xv).data()) EXPECT_TRUE(std::isfinite(g));
}
