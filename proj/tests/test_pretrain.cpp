// Stage-1 training loop: branch decoupling, determinism, BN statistics,
// checkpointing.

#include <gtest/gtest.h>

#include "fd2/data.hpp"
#include "fd2/model.hpp"
#include "fd2/pretrain.hpp"
#include "test_util.hpp"

using namespace fd2;

namespace {

data::ToySpec tiny_spec(int k = 2) {
  data::ToySpec spec;
  spec.num_classes = k;
  spec.train_per_class = 8;
  spec.val_per_class = 4;
  spec.test_per_class = 4;
  spec.image_size = 16;
  spec.mark_size = 3;
  spec.mark_jitter = 1;
  spec.noise_level = 0.02;
  spec.seed = 5;
  return spec;
}

pretrain::PretrainConfig tiny_cfg() {
  pretrain::PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  cfg.num_maps = 2;
  cfg.channels = {8, 16};
  cfg.seed = 11;
  return cfg;
}

Tensor<float> batch_of(const data::Dataset& ds, int n) {
  Tensor<float> b({n, 3, ds.image_size, ds.image_size});
  const std::int64_t stride = ds.images[0].numel();
  for (int i = 0; i < n; ++i)
    std::copy(ds.images[i].v.begin(), ds.images[i].v.end(),
              b.data() + std::int64_t(i) * stride);
  return b;
}

}  // namespace

TEST(PretrainStep, AlphaZeroLeavesCalBranchUntouched) {
  const auto ds = data::make_toy_split(tiny_spec(), "train");
  Rng rng(1);
  model::TeacherModel<float> m(2, 2, 3, {8, 16}, rng);
  cal::PrototypeBank<float> bank(2, 2 * 16, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  w.alpha = 0.0f;

  const Tensor<float> cal_before = m.cal_weight->value;
  const Tensor<float> attn_before = m.attn_conv.weight->value;
  const Tensor<float> bb_before = m.bb_weight->value;
  Rng step_rng(2);
  std::vector<int> labels(ds.labels.begin(), ds.labels.begin() + 8);
  pretrain::pretrain_step(batch_of(ds, 8), labels, m, bank, w, opt, 0.05f,
                          step_rng);
  EXPECT_EQ(m.cal_weight->value.v, cal_before.v);
  EXPECT_EQ(m.attn_conv.weight->value.v, attn_before.v);
  EXPECT_NE(m.bb_weight->value.v, bb_before.v);
}

TEST(PretrainStep, AlphaOneLeavesBackboneHeadUntouched) {
  const auto ds = data::make_toy_split(tiny_spec(), "train");
  Rng rng(3);
  model::TeacherModel<float> m(2, 2, 3, {8, 16}, rng);
  cal::PrototypeBank<float> bank(2, 2 * 16, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  w.alpha = 1.0f;

  const Tensor<float> bb_w = m.bb_weight->value;
  const Tensor<float> bb_b = m.bb_bias->value;
  const Tensor<float> cal_before = m.cal_weight->value;
  Rng step_rng(4);
  std::vector<int> labels(ds.labels.begin(), ds.labels.begin() + 8);
  pretrain::pretrain_step(batch_of(ds, 8), labels, m, bank, w, opt, 0.05f,
                          step_rng);
  EXPECT_EQ(m.bb_weight->value.v, bb_w.v);
  EXPECT_EQ(m.bb_bias->value.v, bb_b.v);
  EXPECT_NE(m.cal_weight->value.v, cal_before.v);
}

TEST(PretrainStep, UpdatesPrototypesAfterStep) {
  const auto ds = data::make_toy_split(tiny_spec(), "train");
  Rng rng(5);
  model::TeacherModel<float> m(2, 2, 3, {8, 16}, rng);
  cal::PrototypeBank<float> bank(2, 2 * 16, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  Rng step_rng(6);
  // one batch containing both classes
  Tensor<float> batch({8, 3, 16, 16});
  std::vector<int> labels;
  const std::int64_t stride = ds.images[0].numel();
  for (int i = 0; i < 8; ++i) {
    const std::size_t src = (i % 2) ? ds.indices_of_class(1)[i / 2]
                                    : ds.indices_of_class(0)[i / 2];
    std::copy(ds.images[src].v.begin(), ds.images[src].v.end(),
              batch.data() + std::int64_t(i) * stride);
    labels.push_back(ds.labels[src]);
  }
  pretrain::pretrain_step(batch, labels, m, bank, w, opt, 0.05f, step_rng);
  EXPECT_EQ(bank.initialized_count(), 2);
  for (int k = 0; k < 2; ++k)
    EXPECT_LE(vnorm(bank.prototype(k)), 1.0f + 1e-6f);
}

TEST(PretrainStep, NonFiniteLossAborts) {
  Rng rng(7);
  model::TeacherModel<float> m(2, 2, 3, {8}, rng);
  cal::PrototypeBank<float> bank(2, 2 * 8, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  Tensor<float> bad({1, 3, 8, 8});
  std::fill(bad.v.begin(), bad.v.end(), 3e38f);
  Rng step_rng(8);
  EXPECT_THROW(
      pretrain::pretrain_step(bad, {0}, m, bank, w, opt, 0.05f, step_rng),
      StateError);
}

TEST(Pretrain, DeterministicAcrossRuns) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  auto c1 = pretrain::pretrain<float>(train, val, w, tiny_cfg());
  auto c2 = pretrain::pretrain<float>(train, val, w, tiny_cfg());
  ASSERT_EQ(c1.params.size(), c2.params.size());
  for (std::size_t i = 0; i < c1.params.size(); ++i) {
    EXPECT_EQ(c1.params[i].first, c2.params[i].first);
    EXPECT_EQ(c1.params[i].second.v, c2.params[i].second.v);
  }
  EXPECT_EQ(c1.history, c2.history);
}

TEST(Pretrain, ZeroLearningRateKeepsUntrainedAccuracy) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  auto cfg = tiny_cfg();
  cfg.lr = 0.0;
  auto ckpt = pretrain::pretrain<float>(train, val, w, cfg);

  Rng init_rng = Rng(cfg.seed).fork(0x696e6974ull);
  model::TeacherModel<float> fresh(train.num_classes(), cfg.num_maps, 3,
                                   cfg.channels, init_rng);
  // parameters match the untrained model exactly, up to BN running stats
  auto trained = pretrain::build_model(ckpt);
  for (std::size_t i = 0; i < fresh.named_parameters().size(); ++i)
    EXPECT_EQ(fresh.named_parameters()[i].second->value.v,
              trained.named_parameters()[i].second->value.v);
  const auto [bb, cal_acc] = pretrain::evaluate_heads(trained, val);
  EXPECT_EQ(bb, ckpt.history.back().first);
}

TEST(Pretrain, HistoryCoversBothHeadsEveryEpoch) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  auto cfg = tiny_cfg();
  cfg.epochs = 3;
  auto ckpt = pretrain::pretrain<float>(train, val, w, cfg);
  ASSERT_EQ(ckpt.history.size(), 3u);
  for (const auto& [bb, cal_acc] : ckpt.history) {
    EXPECT_GE(bb, 0.0);
    EXPECT_LE(bb, 1.0);
    EXPECT_GE(cal_acc, 0.0);
    EXPECT_LE(cal_acc, 1.0);
  }
}

TEST(Pretrain, CheckpointRoundTripReproducesForward) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  auto ckpt = pretrain::pretrain<float>(train, val, w, tiny_cfg());
  auto m1 = pretrain::build_model(ckpt);
  auto m2 = pretrain::build_model(ckpt);
  const auto o1 = model::teacher_forward(train.images[0], m1,
                                         cal::CounterfactualMode::kUniform, 0);
  const auto o2 = model::teacher_forward(train.images[0], m2,
                                         cal::CounterfactualMode::kUniform, 0);
  EXPECT_EQ(o1.p_bb, o2.p_bb);
  EXPECT_EQ(o1.p_eff, o2.p_eff);
  EXPECT_EQ(o1.z, o2.z);
}

TEST(BnStats, FreshModelHasZeroMeanUnitVar) {
  Rng rng(9);
  model::TeacherModel<float> m(2, 2, 3, {4, 8}, rng);
  const auto snap = model::snapshot_bn_stats(m);
  ASSERT_EQ(snap.layer_count(), 2u);
  for (const auto& mean : snap.means)
    for (float v : mean) EXPECT_EQ(v, 0.0f);
  for (const auto& var : snap.vars)
    for (float v : var) EXPECT_EQ(v, 1.0f);
}

TEST(BnStats, SnapshotOfRestoredModelIsIdentical) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  auto ckpt = pretrain::pretrain<float>(train, val, w, tiny_cfg());
  auto restored = pretrain::build_model(ckpt);
  const auto snap = model::snapshot_bn_stats(restored);
  ASSERT_EQ(snap.layer_count(), ckpt.snapshot.layer_count());
  for (std::size_t l = 0; l < snap.layer_count(); ++l) {
    EXPECT_EQ(snap.means[l], ckpt.snapshot.means[l]);
    EXPECT_EQ(snap.vars[l], ckpt.snapshot.vars[l]);
  }
}

TEST(BnStats, RunningMeanTracksConstantInputAnalytically) {
  Rng rng(10);
  model::TeacherModel<float> m(2, 1, 2, {3}, rng);
  cal::PrototypeBank<float> bank(2, 3, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  w.alpha = 0.5f;

  // constant 1x1 image: the first BN layer's input is the conv center tap
  const float x0 = 0.3f, x1 = -0.2f;
  Tensor<float> img({1, 2, 1, 1}, {x0, x1});
  std::vector<float> mu_b(3);
  for (int c = 0; c < 3; ++c)
    mu_b[c] = m.backbone.convs[0].weight->value.v[std::size_t(c) * 2 * 9 + 4] * x0 +
              m.backbone.convs[0].weight->value.v[std::size_t(c) * 2 * 9 + 9 + 4] * x1 +
              m.backbone.convs[0].bias->value[c];

  const int steps = 12;
  Rng step_rng(11);
  for (int t = 0; t < steps; ++t)
    pretrain::pretrain_step(img, {0}, m, bank, w, opt, 0.0f, step_rng);

  const float momentum = m.backbone.bns[0].momentum;
  for (int c = 0; c < 3; ++c) {
    const float expected =
        mu_b[c] * (1.0f - std::pow(1.0f - momentum, float(steps)));
    EXPECT_NEAR(m.backbone.bns[0].running_mean[c], expected, 1e-5);
  }
}

TEST(BnStats, ZeroImagesKeepRunningMeanAtZero) {
  Rng rng(12);
  model::TeacherModel<float> m(2, 1, 3, {4}, rng);
  cal::PrototypeBank<float> bank(2, 4, 0.05f);
  optim::Sgd<float> opt(optim::param_vars(m), 0.9f);
  constraints::LossWeights<float> w;
  Tensor<float> zeros({2, 3, 8, 8});
  Rng step_rng(13);
  for (int t = 0; t < 5; ++t)
    pretrain::pretrain_step(zeros, {0, 1}, m, bank, w, opt, 0.0f, step_rng);
  for (float v : m.backbone.bns[0].running_mean.v) EXPECT_NEAR(v, 0.0f, 1e-7);
}

TEST(Pretrain, RejectsInvalidInputs) {
  const auto train = data::make_toy_split(tiny_spec(), "train");
  const auto val = data::make_toy_split(tiny_spec(), "val");
  constraints::LossWeights<float> w;
  data::Dataset empty;
  EXPECT_THROW(pretrain::pretrain<float>(empty, val, w, tiny_cfg()), ValueError);
  EXPECT_THROW(pretrain::pretrain<float>(train, empty, w, tiny_cfg()), ValueError);
  auto cfg = tiny_cfg();
  cfg.epochs = 0;
  EXPECT_THROW(pretrain::pretrain<float>(train, val, w, cfg), ConfigError);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
