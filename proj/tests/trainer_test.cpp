#include <gtest/gtest.h>

#include <cmath>

#include "smfoley/checkpoint.hpp"
#include "smfoley/trainer.hpp"
#include "test_util.hpp"

namespace smfoley {
namespace {

DatasetConfig tiny_data(const ModelConfig& m) {
    DatasetConfig d;
    d.classes = 2;
    d.block_size = 4;
    d.pattern_period = 2;
    d.feature_dim = m.condition_dim;
    d.sync_frames = 24;
    d.semantic_frames = 8;
    d.vocab = m.vocab;
    d.geometry = m.geometry;
    d.seed = 5;
    return d;
}

TrainConfig tiny_train(Phase phase, long steps) {
    TrainConfig t;
    t.phase = phase;
    t.total_steps = steps;
    t.batch_size = 2;
    t.base_lr = 0.5;
    t.seed = 77;
    t.condition_dropout = 0.5;
    return t;
}

template <class Params>
void expect_params_equal(const Params& a, const Params& b) {
    const auto ta = named_tensors(a);
    const auto tb = named_tensors(b);
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].second, *tb[i].second) << ta[i].first;
}

void expect_logs_equal(const std::vector<StepResult>& a, const std::vector<StepResult>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(loss_csv_row(a[i]), loss_csv_row(b[i]));
}

TEST(LrSchedule, PublishedRecipe) {
    TrainConfig c;  // 140k steps, batch 64, base 1e-3, warmup 2%
    EXPECT_EQ(lr_at(0, c), 0.0);
    EXPECT_DOUBLE_EQ(c.peak_lr(), 2.5e-4);
    EXPECT_DOUBLE_EQ(lr_at(2800, c), 2.5e-4);
    EXPECT_DOUBLE_EQ(lr_at(1400, c), 1.25e-4);
    EXPECT_LT(lr_at(139999, c), 1e-12);
    EXPECT_GT(lr_at(139999, c), 0.0);
}

TEST(LrSchedule, ContinuousAtWarmupEnd) {
    TrainConfig c;
    c.total_steps = 1000;
    c.warmup_fraction = 0.1;
    const double peak = c.peak_lr();
    // both one-sided pieces agree with the peak at the junction
    EXPECT_DOUBLE_EQ(peak * 100.0 / 100.0, lr_at(100, c));
    EXPECT_NEAR(lr_at(99, c), peak * 0.99, 1e-18);
    EXPECT_NEAR(lr_at(101, c), peak * 0.5 * (1.0 + std::cos(kPi / 900.0)), 1e-18);
    for (long s = 1; s < 1000; ++s) EXPECT_LT(std::abs(lr_at(s, c) - lr_at(s - 1, c)), peak * 0.011);
}

TEST(LrSchedule, InvalidConfig) {
    TrainConfig c;
    c.condition_dropout = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.warmup_fraction = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(phase_from_string("finetune"), ConfigError);
}

class TinyTraining : public ::testing::Test {
protected:
    ModelConfig model = testing::tiny_model();
    Dataset ds = make_dataset(tiny_data(model), 12);
    TrainingSet set{ds};
};

TEST_F(TinyTraining, SameSeedSameTrajectory) {
    const auto cfg = tiny_train(Phase::pretrain_backbone, 6);
    auto a = init_pretrain_state(model, 1);
    auto b = init_pretrain_state(model, 1);
    expect_logs_equal(run_training(set, cfg, a), run_training(set, cfg, b));
    expect_params_equal(a.backbone, b.backbone);
}

TEST_F(TinyTraining, ResumeMatchesUninterrupted) {
    const auto cfg = tiny_train(Phase::pretrain_backbone, 8);
    auto full = init_pretrain_state(model, 2);
    const auto full_log = run_training(set, cfg, full);

    auto part = init_pretrain_state(model, 2);
    RunOptions stop;
    stop.stop_at = 3;
    auto log = run_training(set, cfg, part, stop);
    ASSERT_EQ(part.step(), 3);
    auto resumed = state_from_checkpoint(decode_checkpoint(encode_checkpoint(part.checkpoint())), Phase::pretrain_backbone);
    const auto rest = run_training(set, cfg, resumed);
    log.insert(log.end(), rest.begin(), rest.end());
    expect_logs_equal(log, full_log);
    expect_params_equal(resumed.backbone, full.backbone);
}

TEST_F(TinyTraining, ControlNetResumeMatchesUninterrupted) {
    const auto bb = init_pretrain_state(model, 3).backbone;
    const auto cfg = tiny_train(Phase::train_controlnet, 6);
    auto full = init_controlnet_state(bb, 1, model.condition_dim, 3, 4);
    const auto full_log = run_training(set, cfg, full);
    auto part = init_controlnet_state(bb, 1, model.condition_dim, 3, 4);
    RunOptions stop;
    stop.stop_at = 4;
    auto log = run_training(set, cfg, part, stop);
    auto resumed = state_from_checkpoint(decode_checkpoint(encode_checkpoint(part.checkpoint())), Phase::train_controlnet);
    const auto rest = run_training(set, cfg, resumed);
    log.insert(log.end(), rest.begin(), rest.end());
    expect_logs_equal(log, full_log);
    expect_params_equal(*resumed.controlnet, *full.controlnet);
}

TEST_F(TinyTraining, ZeroStepsKeepsInitialization) {
    const auto cfg = tiny_train(Phase::pretrain_backbone, 0);
    auto s = init_pretrain_state(model, 4);
    const auto init = s.backbone;
    EXPECT_TRUE(run_training(set, cfg, s).empty());
    expect_params_equal(s.backbone, init);
    EXPECT_EQ(s.step(), 0);
}

TEST_F(TinyTraining, FullDropoutIgnoresPrompts) {
    auto cfg = tiny_train(Phase::pretrain_backbone, 5);
    cfg.condition_dropout = 1.0;
    Dataset other = ds;
    Rng rng(9);
    for (auto& r : other.records) r.prompt = testing::random_mat(1, model.condition_dim, rng);
    TrainingSet other_set(other);
    auto a = init_pretrain_state(model, 5);
    auto b = init_pretrain_state(model, 5);
    const auto la = run_training(set, cfg, a);
    const auto lb = run_training(other_set, cfg, b);
    expect_logs_equal(la, lb);
    for (const auto& r : la) EXPECT_TRUE(r.cond_dropped);
    expect_params_equal(a.backbone, b.backbone);
}

TEST_F(TinyTraining, FrozenBackboneUnchanged) {
    auto bb = init_pretrain_state(model, 6).backbone;
    const auto before = bb;
    auto state = init_controlnet_state(std::move(bb), 2, model.condition_dim, 3, 6);
    const auto cn_before = *state.controlnet;
    run_training(set, tiny_train(Phase::train_controlnet, 5), state);
    expect_params_equal(state.backbone, before);
    EXPECT_EQ(backbone_hash(state.backbone), backbone_hash(before));
    EXPECT_NE(state.controlnet->conn_w[0], cn_before.conn_w[0]);
}

TEST_F(TinyTraining, NonFiniteLossLeavesStateUntouched) {
    auto s = init_pretrain_state(model, 7);
    s.backbone.head_b(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const auto before = s.backbone;
    Rng rng(1);
    EXPECT_THROW(train_step(s, set, {0, 1}, tiny_train(Phase::pretrain_backbone, 4), rng), NumericError);
    EXPECT_EQ(s.step(), 0);
    EXPECT_EQ(s.backbone.tok_emb, before.tok_emb);
}

TEST_F(TinyTraining, PhaseMismatchAndMissingControlNet) {
    auto s = init_pretrain_state(model, 8);
    EXPECT_THROW(run_training(set, tiny_train(Phase::train_controlnet, 2), s), ConfigError);
    EXPECT_THROW(state_from_checkpoint(s.checkpoint(), Phase::train_controlnet), ConfigError);
}

TEST(ConditionDropout, EmpiricalRate) {
    auto model = testing::tiny_model(0);
    const auto ds = make_dataset(tiny_data(model), 8);
    const TrainingSet set(ds);
    auto cfg = tiny_train(Phase::pretrain_backbone, 10000);
    cfg.batch_size = 1;
    cfg.condition_dropout = 0.9;
    auto s = init_pretrain_state(model, 9);
    const auto log = run_training(set, cfg, s);
    const double rate = static_cast<double>(std::count_if(log.begin(), log.end(), [](const auto& r) { return r.cond_dropped; })) /
                        static_cast<double>(log.size());
    EXPECT_NEAR(rate, 0.9, 0.02);
}

TEST(TrainingMask, AlwaysHidesSomething) {
    Rng rng(10);
    TokenMap t(1, 4, 8);
    for (int i = 0; i < 2000; ++i) EXPECT_GE(training_mask(t, rng, MaskSchedule::cosine).masked_count(), 1);
}

TEST(LossCsv, HeaderAndRow) {
    EXPECT_EQ(loss_csv_header(), "step,lr,loss,cond_dropped\n");
    EXPECT_EQ(loss_csv_row({3, 0.5, 1.25, true}), "3,0.5,1.25,1\n");
}

}  // namespace
}  // namespace smfoley
