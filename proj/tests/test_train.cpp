#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lottalora/train.hpp"

namespace ll = lottalora;

namespace {

ll::ModelConfig blob_model(ll::TrainingMode mode, int rank = 4, int classes = 3, int d = 8) {
  ll::ModelConfig c;
  c.preset = "";
  c.hidden = {32, 16};
  c.input_dim = d;
  c.num_classes = classes;
  c.rank = rank;
  c.mode = mode;
  c.dropout = 0.0;
  return c;
}

ll::TrainConfig quick(int epochs, int batch = 32) {
  ll::TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch;
  t.optimizer.lr = 1e-2;
  return t;
}

}  // namespace

TEST(AdamW, ZeroGradZeroDecayIsNoop) {
  ll::Parameter<double> p("p", ll::MatrixD::Constant(2, 3, 0.7));
  std::vector<ll::Parameter<double>*> ps = {&p};
  ll::AdamWState<double> st;
  ll::adamw_step<double>(ps, st, {.lr = 0.1, .weight_decay = 0.0}, 0.1);
  EXPECT_EQ(p.value, ll::MatrixD::Constant(2, 3, 0.7));
}

TEST(AdamW, SingleScalarStepByHand) {
  ll::Parameter<double> p("p", ll::MatrixD::Constant(1, 1, 1.0));
  p.grad(0, 0) = 0.5;
  std::vector<ll::Parameter<double>*> ps = {&p};
  ll::AdamWState<double> st;
  ll::adamw_step<double>(ps, st, {.lr = 0.1, .weight_decay = 0.01}, 0.1);
  // decay: 1 - 0.1 * 0.01; m_hat = 0.5, v_hat = 0.25; update = 0.1 * 0.5 / (0.5 + 1e-8)
  const double expect = (1.0 - 0.001) - 0.1 * 0.5 / (0.5 + 1e-8);
  EXPECT_NEAR(p.value(0, 0), expect, 1e-15);
  EXPECT_EQ(st.step, 1);
  // Second step, same gradient: m = 0.095, v = 0.00049975.
  ll::adamw_step<double>(ps, st, {.lr = 0.1, .weight_decay = 0.01}, 0.1);
  const double m_hat = 0.095 / (1 - 0.81);
  const double v_hat = 0.00049975 / (1 - 0.999 * 0.999);
  const double expect2 = expect * (1.0 - 0.001) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(p.value(0, 0), expect2, 1e-12);
}

TEST(AdamW, DecoupledDecayShrinksParams) {
  ll::Parameter<double> p("p", ll::MatrixD::Constant(1, 1, 2.0));
  std::vector<ll::Parameter<double>*> ps = {&p};
  ll::AdamWState<double> st;
  ll::adamw_step<double>(ps, st, {.lr = 0.1, .weight_decay = 0.5}, 0.1);
  EXPECT_NEAR(p.value(0, 0), 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(ll::cosine_lr(0, 100, 1e-3), 1e-3);
  EXPECT_NEAR(ll::cosine_lr(100, 100, 1e-3), 0.0, 1e-20);
  EXPECT_NEAR(ll::cosine_lr(50, 100, 1e-3), 5e-4, 1e-18);
  EXPECT_THROW(ll::cosine_lr(101, 100, 1e-3), ll::Error);
}

TEST(Resample, Parse) {
  EXPECT_TRUE(ll::Resample::parse("static").is_static());
  EXPECT_EQ(ll::Resample::parse("epoch").kind, ll::Resample::Kind::per_epoch);
  const auto b = ll::Resample::parse("batch:2");
  EXPECT_EQ(b.kind, ll::Resample::Kind::per_batch);
  EXPECT_EQ(b.k, 2);
  EXPECT_EQ(ll::Resample::parse("micro:4").to_string(), "micro:4");
  EXPECT_THROW(ll::Resample::parse("micro:1"), ll::Error);
  EXPECT_THROW(ll::Resample::parse("batch:x"), ll::Error);
  EXPECT_THROW(ll::Resample::parse("hourly"), ll::Error);
}

TEST(TrainRun, FullTrainingSeparatesBlobs) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(600, 8, 3, 10.0, 1), 42);
  const auto r = ll::train_run<float>(blob_model(ll::TrainingMode::full_training), ll::BackboneSpec{}, quick(10),
                                      data, &data.val);
  EXPECT_GT(r.metrics.epochs.back().train_accuracy, 0.99);
  EXPECT_GT(r.metrics.test_accuracy, 0.99);
}

TEST(TrainRun, LottaLoraLearnsAndKeepsBackboneFrozen) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(600, 8, 3, 10.0, 2), 42);
  std::vector<std::uint64_t> hashes;
  const auto cfg = blob_model(ll::TrainingMode::lottalora);
  ll::Model<float> fresh(cfg, ll::BackboneSpec{});
  const auto r = ll::train_run<float>(cfg, ll::BackboneSpec{}, quick(8), data, &data.val);
  EXPECT_GT(r.metrics.test_accuracy, 0.95);
  EXPECT_EQ(r.metrics.backbone_hash, fresh.backbone_hash());
  EXPECT_EQ(r.metrics.scaffold_redraws, 0);
  EXPECT_NE(r.model.trainable_hash(), fresh.trainable_hash());
  for (const auto& e : r.metrics.epochs) EXPECT_EQ(e.betas.size(), 2u);
}

TEST(TrainRun, DeterministicMetrics) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(300, 8, 3, 4.0, 3), 7);
  auto cfg = blob_model(ll::TrainingMode::lottalora);
  cfg.dropout = 0.1;
  const auto a = ll::train_run<float>(cfg, ll::BackboneSpec{}, quick(3), data, &data.val);
  const auto b = ll::train_run<float>(cfg, ll::BackboneSpec{}, quick(3), data, &data.val);
  ASSERT_EQ(a.metrics.epochs.size(), b.metrics.epochs.size());
  for (std::size_t i = 0; i < a.metrics.epochs.size(); ++i) {
    EXPECT_EQ(a.metrics.epochs[i].train_loss, b.metrics.epochs[i].train_loss);
    EXPECT_EQ(a.metrics.epochs[i].val_loss, b.metrics.epochs[i].val_loss);
    EXPECT_EQ(a.metrics.epochs[i].betas, b.metrics.epochs[i].betas);
  }
  EXPECT_EQ(a.model.trainable_hash(), b.model.trainable_hash());
}

TEST(TrainRun, PerEpochResampleRedrawsEachEpoch) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(300, 8, 3, 4.0, 4), 7);
  auto tc = quick(4);
  tc.resample = ll::Resample::parse("epoch");
  tc.select_best_val = false;
  const auto cfg = blob_model(ll::TrainingMode::lottalora);
  const auto r = ll::train_run<float>(cfg, ll::BackboneSpec{}, tc, data, &data.val);
  EXPECT_EQ(r.metrics.scaffold_redraws, 3);
  ll::Model<float> fresh(cfg, ll::BackboneSpec{});
  EXPECT_NE(r.metrics.backbone_hash, fresh.backbone_hash());
  // The installed scaffold is exactly the one named by the last event.
  ll::Model<float> replay(cfg, ll::BackboneSpec{});
  ll::resample_backbone(replay, tc.resample, r.metrics.scaffold_event);
  EXPECT_EQ(replay.backbone_hash(), r.metrics.backbone_hash);
}

TEST(TrainRun, ResampledRunsReportFinalWeights) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(300, 8, 3, 4.0, 4), 7);
  auto tc = quick(4);
  tc.resample = ll::Resample::parse("epoch");
  ASSERT_TRUE(tc.select_best_val);
  const auto r = ll::train_run<float>(blob_model(ll::TrainingMode::lottalora), ll::BackboneSpec{}, tc, data, &data.val);
  EXPECT_EQ(r.metrics.best_epoch, 3);
  EXPECT_EQ(r.metrics.scaffold_event, 3u);
  EXPECT_EQ(r.metrics.test_accuracy, r.metrics.epochs.back().val_accuracy);
}

TEST(TrainRun, BatchAndMicrobatchSchedulesCountRedraws) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(200, 8, 3, 4.0, 5), 7);
  const auto cfg = blob_model(ll::TrainingMode::lottalora);
  auto tc = quick(2, 45);  // 180 train rows -> 4 steps per epoch
  tc.resample = ll::Resample::parse("batch:2");
  EXPECT_EQ(ll::train_run<float>(cfg, ll::BackboneSpec{}, tc, data).metrics.scaffold_redraws, 2 * 4 * 2);
  tc.resample = ll::Resample::parse("micro:3");
  EXPECT_EQ(ll::train_run<float>(cfg, ll::BackboneSpec{}, tc, data).metrics.scaffold_redraws, 2 * 4 * 3);
}

TEST(TrainRun, StaticResampleIsNoop) {
  const auto cfg = blob_model(ll::TrainingMode::lottalora);
  ll::Model<float> m(cfg, ll::BackboneSpec{});
  const auto h = m.backbone_hash();
  ll::resample_backbone(m, ll::Resample{}, 5);
  EXPECT_EQ(m.backbone_hash(), h);
}

TEST(TrainRun, ResamplingRequiresLottaLora) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(100, 8, 3, 4.0, 5), 7);
  auto tc = quick(1);
  tc.resample = ll::Resample::parse("epoch");
  EXPECT_THROW(ll::train_run<float>(blob_model(ll::TrainingMode::full_training), ll::BackboneSpec{}, tc, data),
               ll::Error);
}

TEST(TrainRun, DivergenceIsRunError) {
  const auto data = ll::split_train_val(ll::synthetic_blobs(200, 8, 3, 4.0, 6), 7);
  auto tc = quick(5);
  tc.optimizer.lr = 1e38;
  try {
    ll::train_run<float>(blob_model(ll::TrainingMode::full_training), ll::BackboneSpec{}, tc, data);
    FAIL();
  } catch (const ll::Error& e) {
    EXPECT_EQ(e.category(), ll::ErrorCategory::run);
    EXPECT_NE(std::string(e.what()).find("last finite epoch"), std::string::npos);
  }
}

TEST(BetaSummary, Statistics) {
  const std::vector<double> b = {0.5, 1.0, 0.8, 0.9, 0.7};
  const auto s = ll::beta_summary(std::span<const double>(b));
  EXPECT_DOUBLE_EQ(s.mean, 0.78);
  EXPECT_DOUBLE_EQ(s.median, 0.8);
  EXPECT_DOUBLE_EQ(s.q1, 0.7);
  EXPECT_DOUBLE_EQ(s.q3, 0.9);
  EXPECT_DOUBLE_EQ(s.min, 0.5);
  EXPECT_THROW(ll::beta_summary(std::span<const double>()), ll::Error);
}

TEST(BetaSummary, UntrainedBetasAreOne) {
  ll::Model<float> m(ll::ModelConfig::from_preset("medium"), ll::BackboneSpec{});
  ll::RunMetrics r;
  r.final_betas = m.betas();
  const auto s = ll::beta_summary(std::span<const ll::RunMetrics>(&r, 1));
  EXPECT_EQ(s.mean, 1.0);
  EXPECT_EQ(s.median, 1.0);
  EXPECT_EQ(s.q1, 1.0);
  EXPECT_EQ(s.q3, 1.0);
  EXPECT_EQ(s.min, 1.0);
}

TEST(SeedGate, AssignedDigitsWinUnderEachSeed) {
  auto all = ll::synthetic_blobs(1200, 8, 6, 3.0, 9);
  const auto test = ll::synthetic_blobs(600, 8, 6, 3.0, 9);
  const auto partition = ll::make_partition({{0, 1, 2}, {3, 4, 5}}, {42, 43}, false, 6);
  auto cfg = blob_model(ll::TrainingMode::lottalora, 4, 6);
  const auto r = ll::seed_gated_train<float>(partition, cfg, ll::InitFamily::make(ll::Family::normal), quick(6),
                                             all, test);
  ASSERT_EQ(r.confusion.size(), 2u);
  for (std::size_t g = 0; g < 2; ++g) {
    EXPECT_GT(r.assigned_accuracy[g], r.other_accuracy[g] + 0.3) << g;
    for (Eigen::Index row = 0; row < r.confusion[g].rows(); ++row) {
      EXPECT_NEAR(r.confusion[g].row(row).sum(), 1.0, 1e-12);
    }
  }
}

TEST(SeedGate, OocModeSendsUnassignedToOoc) {
  auto all = ll::synthetic_blobs(1400, 8, 7, 3.0, 10);
  const auto test = ll::synthetic_blobs(700, 8, 7, 3.0, 10);
  const auto partition = ll::make_partition({{1, 2, 3}, {4, 5, 6}}, {42, 43}, true, 7);
  auto cfg = blob_model(ll::TrainingMode::lottalora, 4, 7);
  const auto r = ll::seed_gated_train<float>(partition, cfg, ll::InitFamily::make(ll::Family::normal), quick(6),
                                             all, test);
  for (std::size_t g = 0; g < 2; ++g) {
    EXPECT_GT(r.zero_ooc_rate[g], 0.8) << g;
    EXPECT_EQ(r.confusion[g].cols(), 8);
  }
}

TEST(SeedGate, SingleGroupIsSubsetTraining) {
  auto all = ll::synthetic_blobs(600, 8, 3, 6.0, 11);
  const auto partition = ll::make_partition({{0, 1, 2}}, {42}, false, 3);
  const auto r = ll::seed_gated_train<float>(partition, blob_model(ll::TrainingMode::lottalora),
                                             ll::InitFamily::make(ll::Family::normal), quick(5), all, all);
  EXPECT_GT(r.assigned_accuracy[0], 0.95);
}
