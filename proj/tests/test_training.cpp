#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "aunet/synthetic.hpp"
#include "aunet/training.hpp"

using namespace aunet;

namespace {

Dataset tiny_dataset(std::size_t n) {
  SyntheticSpec s;
  s.dims = {16, 16, 16};
  s.n_classes = 2;
  s.class_intensity = {0.0, 1.0};
  s.large_radius = {3.5, 5.0};
  s.distractor_count = 0;
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    s.seed = 100 + i;
    auto g = generate_synthetic(s);
    d.push_back({"v" + std::to_string(i), g.image, g.labels});
  }
  return d;
}

}  // namespace

TEST(Dice, PerfectAndDisjointPredictions) {
  Tensor t(Shape{1, 2, 1, 1, 4}, std::vector<double>{1, 1, 0, 0, 0, 0, 1, 1});
  EXPECT_NEAR(dice_loss(t, t).item(), 0.0, 1e-12);
  Tensor flipped(Shape{1, 2, 1, 1, 4}, std::vector<double>{0, 0, 1, 1, 1, 1, 0, 0});
  // each class: (0 + eps) / (4 + eps)
  EXPECT_NEAR(dice_loss(flipped, t).item(), 1.0 - 1e-5 / (4.0 + 1e-5), 1e-15);
}

TEST(Dice, SmoothingKeepsEmptyClassFinite) {
  Tensor p(Shape{1, 2, 1, 1, 2}, std::vector<double>{1, 1, 0, 0});
  Tensor t(Shape{1, 2, 1, 1, 2}, std::vector<double>{1, 1, 0, 0});
  EXPECT_NEAR(dice_loss(p, t).item(), 0.0, 1e-12);  // empty class scores eps/eps = 1
}

TEST(Dice, CombinedLossIsEqualWeightMean) {
  Tensor t(Shape{1, 2, 1, 1, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor a(Shape{1, 2, 1, 1, 2}, std::vector<double>{0.7, 0.2, 0.3, 0.8});
  Tensor b(Shape{1, 2, 1, 1, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
  const double expect = (dice_loss(a, t).item() + dice_loss(b, t).item()) / 2.0;
  EXPECT_NEAR(combined_loss(a, {b}, t).item(), expect, 1e-15);
  EXPECT_EQ(combined_loss(a, {}, t).item(), dice_loss(a, t).item());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}, true);
  AdamState st;
  adam_step(st, {w}, {std::vector<double>{0.3, -4.0, 0.0}});
  // bias-corrected first step is lr * g/|g| (up to epsilon)
  EXPECT_NEAR(w[0], 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w[1], -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(w[2], 0.5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  Tensor w(Shape{1}, std::vector<double>{0.0}, true);
  AdamState st;
  adam_step(st, {w}, {std::vector<double>{1.0}});
  adam_step(st, {w}, {std::vector<double>{3.0}});
  const double m = 0.9 * 0.1 + 0.1 * 3.0, v = 0.999 * 0.001 + 0.001 * 9.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double first = -1e-3 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(w[0], first - 1e-3 * mh / (std::sqrt(vh) + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientThrowsAndLeavesWeights) {
  Tensor w(Shape{2}, std::vector<double>{1.0, 2.0}, true);
  AdamState st;
  EXPECT_THROW(adam_step(st, {w}, {std::vector<double>{0.1, std::numeric_limits<double>::quiet_NaN()}}),
               NumericalError);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(st.step, 0u);
}

TEST(Train, LossDecreasesAndRunsAreDeterministic) {
  const Dataset d = tiny_dataset(2);
  ModelConfig mc;
  mc.depth = 2;
  mc.base_channels = 4;
  mc.n_classes = 2;
  TrainConfig tc;
  tc.epochs = 8;
  tc.learning_rate = 1e-2;
  tc.augment = false;
  Network a = Network::build(mc, 1), b = Network::build(mc, 1);
  const TrainResult ra = train(a, d, tc), rb = train(b, d, tc);
  ASSERT_EQ(ra.log.epochs.size(), 8u);
  EXPECT_LT(ra.log.epochs.back().loss, ra.log.epochs.front().loss);
  EXPECT_EQ(ra.log.to_jsonl(), rb.log.to_jsonl());
  EXPECT_EQ(ra.optimizer.step, 8u);  // one batch of two per epoch
}

TEST(Train, AccumulationStepsAverageGradients) {
  const Dataset d = tiny_dataset(2);
  ModelConfig mc;
  mc.depth = 2;
  mc.base_channels = 2;
  mc.n_classes = 2;
  TrainConfig one, acc;
  one.epochs = acc.epochs = 1;
  one.augment = acc.augment = false;
  one.batch_size = 2;
  acc.batch_size = 1;
  acc.accumulation_steps = 2;
  Network a = Network::build(mc, 3), b = Network::build(mc, 3);
  train(a, d, one);
  const TrainResult rb = train(b, d, acc);
  EXPECT_EQ(rb.optimizer.step, 1u);
  // batch-norm statistics differ between a batch of two and two batches of
  // one, so only the step count is comparable here
}

TEST(Train, ResumeContinuesEpochAndStepNumbering) {
  const Dataset d = tiny_dataset(2);
  ModelConfig mc;
  mc.depth = 2;
  mc.base_channels = 2;
  mc.n_classes = 2;
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 1;
  Network full = Network::build(mc, 4), part = Network::build(mc, 4);
  TrainConfig four = tc;
  four.epochs = 4;
  const TrainResult rf = train(full, d, four);
  const TrainResult r1 = train(part, d, tc);
  const TrainResult r2 = train(part, d, tc, nullptr, r1.optimizer, 2);
  EXPECT_EQ(r2.log.epochs.front().epoch, 3u);
  EXPECT_EQ(r2.optimizer.step, 8u);
  EXPECT_EQ(TrainingLog::to_line(r2.log.epochs.back()), TrainingLog::to_line(rf.log.epochs.back()));
  const auto pf = full.parameters(), pp = part.parameters();
  for (std::size_t i = 0; i < pf.size(); ++i)
    ASSERT_TRUE(std::equal(pf[i].data().begin(), pf[i].data().end(), pp[i].data().begin()));
}

TEST(Train, ValidationTracksBestState) {
  const Dataset d = tiny_dataset(3);
  const Dataset val(d.begin() + 2, d.end()), fit(d.begin(), d.begin() + 2);
  ModelConfig mc;
  mc.depth = 2;
  mc.base_channels = 2;
  mc.n_classes = 2;
  TrainConfig tc;
  tc.epochs = 3;
  Network net = Network::build(mc, 5);
  const TrainResult r = train(net, fit, tc, &val);
  ASSERT_TRUE(r.best.has_value());
  EXPECT_GE(r.best_epoch, 1u);
  for (const auto& e : r.log.epochs) EXPECT_EQ(e.val_dsc.size(), 2u);
}

TEST(Train, EmptyDatasetIsConfigError) {
  Network net = Network::build(ModelConfig{.depth = 2}, 1);
  EXPECT_THROW(train(net, {}, TrainConfig{}), ConfigError);
}

TEST(Seeds, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
}
