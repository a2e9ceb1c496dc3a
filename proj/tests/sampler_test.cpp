#include <gtest/gtest.h>

#include <chrono>

#include "smfoley/sampler.hpp"
#include "test_util.hpp"

namespace smfoley {
namespace {

using testing::random_mat;

LogitsGrid random_logits(int F, int T, int V, Rng& rng, double scale = 1.0) {
    return {F, T, random_mat(static_cast<Eigen::Index>(F) * T, V, rng, scale)};
}

TEST(CfgCombine, ZeroScaleIsUnconditional) {
    Rng rng(1);
    const auto u = random_logits(5, 53, 8, rng);
    const auto v = random_logits(5, 53, 8, rng);
    const auto tv = random_logits(5, 53, 8, rng);
    EXPECT_EQ(cfg_combine(u, v, tv, 0.0).data, u.data);
}

TEST(CfgCombine, SharedDeltaDoubles) {
    // small dyadic values keep every operation exact
    Rng rng(2);
    LogitsGrid u{2, 3, Mat(6, 4)};
    Mat delta(6, 4);
    for (Eigen::Index i = 0; i < u.data.size(); ++i) {
        u.data.data()[i] = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
        delta.data()[i] = static_cast<double>(static_cast<int>(rng.below(16)) - 8) / 4.0;
    }
    LogitsGrid d = u;
    d.data += delta;
    for (double t : {0.0, 0.5, 1.0, 2.0, 3.0}) {
        const Mat expected = u.data + 2.0 * t * delta;
        EXPECT_EQ(cfg_combine(u, d, d, t).data, expected) << "t=" << t;
    }
}

TEST(CfgCombine, ElementwiseOracle) {
    Rng rng(3);
    const auto u = random_logits(5, 53, 16, rng, 3.0);
    const auto v = random_logits(5, 53, 16, rng, 3.0);
    const auto tv = random_logits(5, 53, 16, rng, 3.0);
    const double t = 3.0;
    const auto out = cfg_combine(u, v, tv, t);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < out.data.size(); ++i) {
        const double a = u.data.data()[i], b = v.data.data()[i], c = tv.data.data()[i];
        const double oracle = a + t * ((c - a) + (b - a));
        worst = std::max(worst, std::abs(out.data.data()[i] - oracle));
    }
    EXPECT_LE(worst, 1e-15);
}

TEST(CfgCombine, AffineInScaleAndShapeChecked) {
    Rng rng(4);
    const auto u = random_logits(1, 4, 3, rng);
    const auto v = random_logits(1, 4, 3, rng);
    const auto tv = random_logits(1, 4, 3, rng);
    const Mat mid = cfg_combine(u, v, tv, 1.5).data;
    const Mat avg = (cfg_combine(u, v, tv, 1.0).data + cfg_combine(u, v, tv, 2.0).data) / 2.0;
    EXPECT_LT((mid - avg).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_THROW(cfg_combine(u, random_logits(1, 5, 3, rng), tv, 1.0), ShapeError);
    EXPECT_EQ(cfg_single(u, v, 0.0).data, u.data);
}

TEST(CfgSchedule, LinearRamp) {
    SamplerConfig c;
    EXPECT_EQ(cfg_scale_at(0, c), 0.0);
    EXPECT_EQ(cfg_scale_at(11, c), 3.0);
    EXPECT_NEAR(cfg_scale_at(5, c), 15.0 / 11.0, 1e-15);
    EXPECT_NEAR(cfg_scale_at(5, c), 1.3636, 1e-4);
    c.steps = 1;
    EXPECT_EQ(cfg_scale_at(0, c), 0.0);
    EXPECT_THROW(cfg_scale_at(1, c), ArgumentError);
}

TEST(CfgSchedule, GumbelAnnealsToZero) {
    SamplerConfig c;
    EXPECT_EQ(gumbel_temp_at(0, c), 9.0);
    EXPECT_EQ(gumbel_temp_at(11, c), 0.0);
    c.steps = 1;
    EXPECT_EQ(gumbel_temp_at(0, c), 0.0);
}

TEST(SampleStep, SingleGreedyStepIsArgmax) {
    Rng rng(5);
    const auto l = random_logits(5, 53, 16, rng);
    SamplerConfig c;
    c.steps = 1;
    c.gumbel_temp = 0.0;
    c.greedy_final = true;
    SamplerState s{MaskedTokenMap::fully_masked(5, 53, 16), 0, Rng(9)};
    sample_step(s, l, c);
    EXPECT_EQ(s.current.masked_count(), 0);
    for (int n = 0; n < 265; ++n) {
        Eigen::Index best;
        l.data.row(n).maxCoeff(&best);
        EXPECT_EQ(s.current.tokens.ids[n], best);
    }
    EXPECT_THROW(sample_step(s, l, c), StateError);
}

TEST(SampleStep, FollowsPlanAndNeverRewrites) {
    Rng rng(6);
    SamplerConfig c;
    const auto remaining = masked_remaining(265, 12);
    ASSERT_EQ(remaining, (std::vector<int>{262, 255, 244, 229, 210, 187, 161, 132, 101, 68, 34, 0}));
    SamplerState s{MaskedTokenMap::fully_masked(5, 53, 16), 0, Rng(10)};
    for (int k = 0; k < 12; ++k) {
        const auto before = s.current;
        sample_step(s, random_logits(5, 53, 16, rng), c);
        EXPECT_EQ(s.current.masked_count(), remaining[k]);
        for (int n = 0; n < 265; ++n) {
            if (!before.mask[n]) EXPECT_EQ(s.current.tokens.ids[n], before.tokens.ids[n]);
            if (!before.mask[n]) EXPECT_EQ(s.current.mask[n], 0);
        }
    }
    s.current.tokens.validate();
}

TEST(SampleStep, ZeroTemperatureIsDeterministicInLogits) {
    Rng rng(7);
    const auto l = random_logits(5, 53, 16, rng);
    SamplerConfig c;
    c.gumbel_temp = 0.0;
    SamplerState a{MaskedTokenMap::fully_masked(5, 53, 16), 0, Rng(11)};
    SamplerState b{MaskedTokenMap::fully_masked(5, 53, 16), 0, Rng(11)};
    sample_step(a, l, c);
    sample_step(b, l, c);
    EXPECT_EQ(a.current.tokens.ids, b.current.tokens.ids);
    EXPECT_EQ(a.current.mask, b.current.mask);
}

TEST(SampleStep, TiesBreakByPosition) {
    // identical rows with one dominant token and no noise: every candidate ties
    LogitsGrid l{1, 8, Mat::Zero(8, 4)};
    l.data.col(2).setConstant(100.0);
    SamplerConfig c;
    c.steps = 2;
    c.gumbel_temp = 0.0;
    SamplerState s{MaskedTokenMap::fully_masked(1, 8, 4), 0, Rng(3)};
    sample_step(s, l, c);
    const int revealed = 8 - s.current.masked_count();
    ASSERT_GT(revealed, 0);
    for (int n = 0; n < 8; ++n) EXPECT_EQ(s.current.mask[n], n < revealed ? 0 : 1);
}

struct Toy {
    RunConfig rc = testing::toy_run_config();
    BackboneParams bb;
    ControlNetParams cn;
    AlignedControlGrid grid;
    ConditionEmbedding prompt;

    Toy() {
        Rng rng(21);
        bb = init_backbone(rc.model, rng);
        cn = build_controlnet(bb, rc.n_copy, rc.data.feature_dim, rng);
        testing::jitter(cn, rng, 0.05);
        grid = align_features(cn, {random_mat(240, rc.data.feature_dim, rng), 24.0}, rc.model.F());
        prompt = ConditionEmbedding::prompt(random_mat(1, rc.data.feature_dim, rng));
    }
};

TEST(Generate, DeterministicAndFullyRevealed) {
    const Toy toy;
    SamplerConfig c;
    Rng r1(5), r2(5);
    std::vector<StepTrace> trace;
    const auto a = generate(toy.bb, &toy.cn, toy.prompt, &toy.grid, c, r1, Guidance::multi, &trace);
    const auto b = generate(toy.bb, &toy.cn, toy.prompt, &toy.grid, c, r2);
    EXPECT_EQ(a.ids, b.ids);
    a.validate();
    ASSERT_EQ(trace.size(), 12u);
    const auto remaining = masked_remaining(265, 12);
    for (int k = 0; k < 12; ++k) {
        EXPECT_EQ(trace[k].masked_after, remaining[k]);
        EXPECT_DOUBLE_EQ(trace[k].cfg_scale, cfg_scale_at(k, c));
    }
    const auto csv = trace_csv(trace);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

TEST(Generate, ZeroGuidanceMatchesBackboneOnly) {
    const Toy toy;
    SamplerConfig c;
    c.cfg_max = 0.0;
    for (auto mode : {Guidance::multi, Guidance::without_video, Guidance::without_text_video}) {
        Rng r1(8), r2(8);
        const auto guided = generate(toy.bb, &toy.cn, toy.prompt, &toy.grid, c, r1, mode);
        const auto plain = generate(toy.bb, nullptr, toy.prompt, nullptr, c, r2, Guidance::backbone_uncond);
        EXPECT_EQ(guided.ids, plain.ids) << to_string(mode);
    }
}

TEST(Generate, GuidanceModesRoundTripNames) {
    for (auto g : {Guidance::multi, Guidance::without_video, Guidance::without_text_video, Guidance::backbone_uncond}) {
        EXPECT_EQ(guidance_from_string(to_string(g)), g);
    }
    EXPECT_THROW(guidance_from_string("nope"), ConfigError);
    const Toy toy;
    Rng rng(1);
    EXPECT_THROW(generate(toy.bb, nullptr, toy.prompt, nullptr, SamplerConfig{}, rng), ConfigError);
}

TEST(Generate, ToyClipUnderOneSecond) {
    const Toy toy;
    Rng rng(9);
    const auto start = std::chrono::steady_clock::now();
    generate(toy.bb, &toy.cn, toy.prompt, &toy.grid, SamplerConfig{}, rng);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_LT(secs, 1.0);
}

}  // namespace
}  // namespace smfoley
