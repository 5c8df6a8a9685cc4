#include <gtest/gtest.h>

#include <cmath>

#include "laat/training.hpp"

using namespace laat;

namespace {

TrainConfig clean_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr = 0.05;
  cfg.lr_decay_epochs = {};
  cfg.alpha = 0.0;
  cfg.attack.epsilon = 0.0;
  cfg.attack.step_size = 0.0;
  cfg.batch_size = 64;
  cfg.track_curve = true;
  cfg.curve_samples = 0;
  cfg.curve_attack.epsilon = 0.0;
  cfg.curve_attack.step_size = 0.0;
  return cfg;
}

}  // namespace

TEST(Sgd, HandSteppedTwoParameterExample) {
  const std::vector<Tensor> g1 = {Tensor({2}, std::vector<double>{0.5, -1.0})};
  const std::vector<Tensor> g2 = {Tensor({2}, std::vector<double>{0.2, 0.3})};

  std::vector<Tensor> w = {Tensor({2}, std::vector<double>{1.0, 2.0})};
  SgdMomentum plain(0.9, 0.0);
  plain.step(w, g1, 0.1);
  EXPECT_NEAR(w[0][0], 0.95, 1e-15);
  EXPECT_NEAR(w[0][1], 2.1, 1e-15);
  plain.step(w, g2, 0.1);
  EXPECT_NEAR(w[0][0], 0.885, 1e-15);
  EXPECT_NEAR(w[0][1], 2.16, 1e-15);

  std::vector<Tensor> v = {Tensor({2}, std::vector<double>{1.0, 2.0})};
  SgdMomentum decayed(0.9, 0.01);
  decayed.step(v, g1, 0.1);
  EXPECT_NEAR(v[0][0], 0.949, 1e-15);
  EXPECT_NEAR(v[0][1], 2.098, 1e-15);
  decayed.step(v, g2, 0.1);
  EXPECT_NEAR(v[0][0], 0.882151, 1e-14);
  EXPECT_NEAR(v[0][1], 2.154102, 1e-14);
}

TEST(Schedule, DefaultStepDecay) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 1), 0.1);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 100), 0.1);
  EXPECT_NEAR(lr_at_epoch(cfg, 101), 0.01, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 150), 0.01, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 151), 0.001, 1e-15);
  EXPECT_NEAR(lr_at_epoch(cfg, 200), 0.001, 1e-15);
}

TEST(Config, DefaultsAndValidation) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.epochs, 200);
  EXPECT_DOUBLE_EQ(cfg.momentum, 0.9);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 5e-4);
  EXPECT_DOUBLE_EQ(cfg.alpha, 3.0);
  EXPECT_EQ(cfg.attack.steps, 7);
  EXPECT_NO_THROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.alpha = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Dataset, DeterministicAndValidated) {
  const Dataset a = make_synthetic_dataset(4, 8, 20, 0.1, 3);
  const Dataset b = make_synthetic_dataset(4, 8, 20, 0.1, 3);
  EXPECT_EQ(a.train.x.data(), b.train.x.data());
  EXPECT_EQ(a.test.x.data(), b.test.x.data());
  EXPECT_EQ(a.train.y, b.train.y);
  EXPECT_EQ(a.labels, default_class_labels(4));
  EXPECT_EQ(a.train.size() + a.test.size(), 80u);
  for (double v : a.train.x.data()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_THROW(make_synthetic_dataset(4, 8, 20, 0.0, 3), std::invalid_argument);
  EXPECT_THROW(make_synthetic_dataset(1, 8, 20, 0.1, 3), std::invalid_argument);
}

TEST(Dataset, LabelsMustMapToAnchors) {
  const Dataset d = make_synthetic_dataset(3, 4, 8, 0.1, 1);
  const AnchorSet two = generate_mmc_anchors(2, 4);
  EXPECT_THROW(align_to_anchors(d.train, d.labels, two), std::exception);
  Mlp net({4, {8}, 4}, 0);
  EXPECT_THROW(train(net, d, two, clean_config(1)), std::exception);
}

TEST(Train, TinySpreadIsLinearlySeparable) {
  const Dataset d = make_synthetic_dataset(4, 16, 40, 1e-3, 2);
  const AnchorSet anchors = generate_mmc_anchors(4, 8);
  Mlp probe({16, {}, 8}, 1);
  train(probe, d, anchors, clean_config(30));
  EXPECT_EQ(clean_accuracy(probe, anchors.vectors(), align_to_anchors(d.test, d.labels, anchors).x,
                           align_to_anchors(d.test, d.labels, anchors).y),
            1.0);
}

TEST(Train, PinnedCleanBaseline) {
  // 5 classes, dim 32, spread 0.1: a two-hidden-layer MLP must pass 95% clean
  // accuracy within 50 epochs.
  const Dataset d = make_synthetic_dataset(5, 32, 200, 0.1, 0);
  const AnchorSet anchors = generate_mmc_anchors(5, 16);
  Mlp net({32, {128, 128}, 16}, 0);
  TrainConfig cfg = clean_config(50);
  cfg.track_curve = false;
  train(net, d, anchors, cfg);
  const Split test = align_to_anchors(d.test, d.labels, anchors);
  EXPECT_GT(clean_accuracy(net, anchors.vectors(), test.x, test.y), 0.95);
}

TEST(Train, CleanTrainingLossIsNonIncreasing) {
  const Dataset d = make_synthetic_dataset(5, 16, 80, 0.15, 4);
  const AnchorSet anchors = generate_mmc_anchors(5, 8);
  Mlp net({16, {32}, 8}, 3);
  TrainConfig cfg = clean_config(40);
  cfg.track_curve = false;
  const LearningCurve curve = train(net, d, anchors, cfg);
  ASSERT_EQ(curve.size(), 40u);
  auto window = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t i = end - 10; i < end; ++i) s += curve[i].train_loss;
    return s / 10.0;
  };
  for (std::size_t end = 11; end <= curve.size(); ++end)
    EXPECT_LE(window(end), window(end - 1) + 1e-3) << "window ending at epoch " << end;
  EXPECT_LT(curve.back().train_loss, curve.front().train_loss);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_EQ(curve[i].epoch, curve[i - 1].epoch + 1);
}

TEST(Train, AdversarialRunIsDeterministic) {
  const Dataset d = make_synthetic_dataset(3, 12, 40, 0.1, 5);
  const AnchorSet anchors = generate_mmc_anchors(3, 6);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.curve_samples = 20;
  auto run = [&] {
    Mlp net({12, {16}, 6}, 8);
    const auto curve = train(net, d, anchors, cfg);
    return std::make_pair(curve, net.parameters());
  };
  const auto [c1, p1] = run();
  const auto [c2, p2] = run();
  ASSERT_EQ(c1.size(), c2.size());
  for (std::size_t i = 0; i < c1.size(); ++i) {
    EXPECT_EQ(c1[i].train_loss, c2[i].train_loss);
    EXPECT_EQ(c1[i].clean_acc, c2[i].clean_acc);
    EXPECT_EQ(c1[i].robust_acc, c2[i].robust_acc);
  }
  for (std::size_t k = 0; k < p1.size(); ++k) EXPECT_EQ(p1[k].data(), p2[k].data());
}

TEST(Train, AllObjectivesRun) {
  const Dataset d = make_synthetic_dataset(3, 8, 20, 0.1, 6);
  const AnchorSet anchors = generate_mmc_anchors(3, 4);
  for (const LossKind& k : std::vector<LossKind>{loss::Ace{}, loss::Ace{0.5}, loss::CosTheta{},
                                                 loss::Theta{}, loss::Euclid{}, loss::TradesKl{}}) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.loss = k;
    cfg.track_curve = false;
    Mlp net({8, {8}, 4}, 2);
    const auto curve = train(net, d, anchors, cfg);
    ASSERT_EQ(curve.size(), 2u) << loss_name(k);
    EXPECT_TRUE(std::isfinite(curve.back().train_loss)) << loss_name(k);
  }
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  const Dataset d = make_synthetic_dataset(3, 8, 20, 0.1, 7);
  const AnchorSet anchors = generate_mmc_anchors(3, 4);
  Mlp net({8, {8}, 4}, 2);
  TrainConfig cfg = clean_config(5);
  cfg.lr = 1e300;
  cfg.loss = loss::Euclid{};
  try {
    train(net, d, anchors, cfg);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr 1e+300"), std::string::npos) << msg;
  }
}

TEST(Train, DimensionMismatchIsRejected) {
  const Dataset d = make_synthetic_dataset(3, 8, 20, 0.1, 7);
  const AnchorSet anchors = generate_mmc_anchors(3, 4);
  Mlp wrong_out({8, {8}, 5}, 2);
  EXPECT_THROW(train(wrong_out, d, anchors, clean_config(1)), std::invalid_argument);
  Mlp wrong_in({9, {8}, 4}, 2);
  EXPECT_THROW(train(wrong_in, d, anchors, clean_config(1)), std::invalid_argument);
}
