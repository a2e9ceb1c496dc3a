#include <gtest/gtest.h>

#include "smfoley/eval.hpp"
#include "test_util.hpp"

namespace smfoley {
namespace {

GaussianSummary gaussian(Vec mean, Mat cov) { return {std::move(mean), std::move(cov), 100}; }

Mat random_psd(int d, Rng& rng) {
    const Mat a = testing::random_mat(d, d + 2, rng);
    return a * a.transpose() / (d + 2.0);
}

Mat random_rotation(int d, Rng& rng) {
    Eigen::HouseholderQR<Mat> qr(testing::random_mat(d, d, rng));
    return qr.householderQ();
}

TEST(FrechetDistance, ClosedForms) {
    Rng rng(1);
    const auto a = gaussian(testing::random_mat(4, 1, rng), random_psd(4, rng));
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-9);

    const auto n0 = gaussian(Vec::Constant(1, 0.0), Mat::Constant(1, 1, 1.0));
    const auto n1 = gaussian(Vec::Constant(1, 1.0), Mat::Constant(1, 1, 1.0));
    EXPECT_NEAR(frechet_distance(n0, n1), 1.0, 1e-9);

    Mat da = Mat::Zero(2, 2), db = Mat::Zero(2, 2);
    da.diagonal() << 1.0, 4.0;
    db.diagonal() << 4.0, 1.0;
    EXPECT_NEAR(frechet_distance(gaussian(Vec::Zero(2), da), gaussian(Vec::Zero(2), db)), 2.0, 1e-9);
}

TEST(FrechetDistance, SymmetricAndRotationInvariant) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 2 + trial % 5;
        const auto a = gaussian(testing::random_mat(d, 1, rng), random_psd(d, rng));
        const auto b = gaussian(testing::random_mat(d, 1, rng), random_psd(d, rng));
        const double ab = frechet_distance(a, b);
        EXPECT_GE(ab, 0.0);
        EXPECT_NEAR(ab, frechet_distance(b, a), 1e-9);
        const Mat q = random_rotation(d, rng);
        const auto ra = gaussian(q * a.mean, q * a.cov * q.transpose());
        const auto rb = gaussian(q * b.mean, q * b.cov * q.transpose());
        EXPECT_NEAR(frechet_distance(ra, rb), ab, 1e-6);
    }
}

TEST(FrechetDistance, Errors) {
    const auto a = gaussian(Vec::Zero(2), Mat::Identity(2, 2));
    EXPECT_THROW(frechet_distance(a, gaussian(Vec::Zero(3), Mat::Identity(3, 3))), ShapeError);
    Mat neg = Mat::Identity(2, 2);
    neg(1, 1) = -1.0;
    EXPECT_THROW(frechet_distance(a, gaussian(Vec::Zero(2), neg)), NumericError);
    EXPECT_THROW(summarize(Mat::Zero(1, 2)), DegenerateInputError);
}

TEST(Summarize, UnbiasedMoments) {
    Mat x(3, 1);
    x << 1.0, 2.0, 6.0;
    const auto s = summarize(x);
    EXPECT_DOUBLE_EQ(s.mean(0), 3.0);
    EXPECT_DOUBLE_EQ(s.cov(0, 0), 7.0);  // (4 + 1 + 9) / 2
    EXPECT_EQ(s.count, 3);
}

DatasetConfig toy() {
    DatasetConfig c;
    c.seed = 3;
    return c;
}

/// Shifts every column right by `k`, filling with background.
TokenMap shifted(const TokenMap& m, int k, const DatasetConfig& c) {
    TokenMap out(m.F, m.T, m.vocab, c.background_token);
    for (int t = k; t < m.T; ++t) {
        for (int f = 0; f < m.F; ++f) out.at(f, t) = m.at(f, t - k);
    }
    return out;
}

TEST(EmbedTokens, ColumnFractions) {
    const auto c = toy();
    const TokenMap bg(c.F(), c.T(), c.vocab, c.background_token);
    Vec expected = Vec::Zero(c.classes + 1);
    expected(c.classes) = 1.0;
    EXPECT_EQ(embed_tokens(bg, c), expected);

    TokenMap m = bg;
    for (int t = 0; t < 26; ++t) {
        for (int f = 0; f < c.F(); ++f) m.at(f, t) = event_token(0, f, t, c);
    }
    const auto e = embed_tokens(m, c);
    EXPECT_DOUBLE_EQ(e(0), 26.0 / 53.0);
    EXPECT_DOUBLE_EQ(e(c.classes), 27.0 / 53.0);

    // same per-class column counts, different placement
    EXPECT_EQ(embed_tokens(shifted(m, 10, c), c).size(), e.size());
    TokenMap moved = bg;
    for (int t = 20; t < 46; ++t) {
        for (int f = 0; f < c.F(); ++f) moved.at(f, t) = event_token(0, f, t, c);
    }
    EXPECT_EQ(embed_tokens(moved, c), e);
}

SyntheticScene two_events() {
    SyntheticScene s;
    s.events = {{1.0, 1.0, 0}, {5.0, 1.5, 2}};
    return s;
}

TEST(ToyDesync, PerfectShiftedAndMissing) {
    const auto c = toy();
    const auto scene = two_events();
    const auto target = render_tokens(scene, c);
    EXPECT_EQ(toy_desync(target, scene, c), 0.0);
    EXPECT_NEAR(toy_desync(shifted(target, 1, c), scene, c), 10.0 / 53.0, 1e-15);
    EXPECT_NEAR(10.0 / 53.0, 0.1887, 1e-4);

    SyntheticScene one;
    one.events = {{3.0, 1.0, 1}};
    const TokenMap bg(c.F(), c.T(), c.vocab, c.background_token);
    EXPECT_EQ(toy_desync(bg, one, c), 5.0);
}

TEST(ToyDesync, TranslationCovariant) {
    const auto c = toy();
    const auto scene = two_events();
    const auto target = render_tokens(scene, c);
    for (int k = 1; k < 5; ++k) {
        const double a = toy_desync(shifted(target, k, c), scene, c);
        const double b = toy_desync(shifted(target, k + 1, c), scene, c);
        EXPECT_NEAR(b - a, 10.0 / 53.0, 1e-12) << k;
    }
}

TEST(ToyDesync, WrongClassCountsAsMiss) {
    const auto c = toy();
    SyntheticScene truth;
    truth.events = {{2.0, 1.0, 0}};
    SyntheticScene other;
    other.events = {{2.0, 1.0, 1}};
    EXPECT_EQ(toy_desync(render_tokens(other, c), truth, c), 5.0);
}

TEST(MaskedAccuracy, SelfIsOne) {
    const auto c = toy();
    const auto target = render_tokens(two_events(), c);
    EXPECT_EQ(masked_accuracy(target, target), 1.0);
    EXPECT_LT(masked_accuracy(shifted(target, 1, c), target), 1.0);
}

TEST(AblationReport, RowsAndFormats) {
    const auto rc = testing::toy_run_config();
    Rng rng(4);
    const auto bb = init_backbone(rc.model, rng);
    const auto cn = build_controlnet(bb, rc.n_copy, rc.data.feature_dim, rng);
    const auto data = make_dataset(rc.data, 2);

    AblationOptions o;
    o.clips = 2;
    o.sampler.steps = 2;
    o.include_single_cfg = true;
    o.include_sweep = true;
    const auto rows = ablation_report(bb, &cn, data, o);
    ASSERT_EQ(rows.size(), 4u + sweep_steps().size());
    EXPECT_EQ(rows[0].variant, "backbone_uncond");
    EXPECT_EQ(rows[1].variant, "multi_cfg");
    EXPECT_EQ(rows[2].variant, "cfg_without_video");
    EXPECT_EQ(rows[3].variant, "cfg_without_text_video");
    std::vector<int> steps;
    for (std::size_t i = 4; i < rows.size(); ++i) steps.push_back(rows[i].steps);
    EXPECT_EQ(steps, (std::vector<int>{1, 4, 6, 8, 12, 16}));
    for (const auto& r : rows) {
        EXPECT_GE(r.fd, 0.0);
        EXPECT_LE(r.toy_desync, rc.data.clip_length);
    }
    const auto csv = report_csv(rows);
    EXPECT_EQ(csv.rfind("variant,steps,cfg_max,fd,toy_desync,masked_accuracy,wall_time\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(rows.size()) + 1);
    const auto series = sweep_series_csv(rows);
    EXPECT_EQ(std::count(series.begin(), series.end(), '\n'), 7);
    EXPECT_EQ(report_json(rows, 2)["rows"].size(), rows.size());

    AblationOptions solo;
    solo.clips = 2;
    solo.sampler.steps = 2;
    EXPECT_EQ(ablation_report(bb, nullptr, data, solo).size(), 1u);
}

TEST(AblationReport, GuidedVariantNeedsControlNet) {
    const auto rc = testing::toy_run_config();
    Rng rng(5);
    const auto bb = init_backbone(rc.model, rng);
    const auto data = make_dataset(rc.data, 2);
    EXPECT_THROW(evaluate_variant(bb, nullptr, data, {"multi_cfg", Guidance::multi, {}}, 2, 0), ConfigError);
}

}  // namespace
}  // namespace smfoley
