#include <gtest/gtest.h>

#include "smfoley/features.hpp"
#include "test_util.hpp"

namespace smfoley {
namespace {

ControlFeatureSequence seq(Mat data, double rate = 24.0) { return {std::move(data), rate}; }

TEST(FuseSemantic, AdditiveIdentityAndConstantRows) {
    Rng rng(1);
    const auto sync = seq(testing::random_mat(10, 3, rng));
    EXPECT_EQ(fuse_semantic(sync, seq(Mat::Zero(4, 3), 8.0)).data, sync.data);

    Mat sem(4, 3);
    sem.rowwise() = RowVec::LinSpaced(3, 0.5, 1.5);
    const auto fused = fuse_semantic(sync, seq(sem, 8.0));
    for (int i = 0; i < 10; ++i) {
        for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(fused.data(i, c), sync.data(i, c) + sem(0, c));
    }
}

TEST(FuseSemantic, HandComputedMean) {
    Mat sem(3, 2);
    sem << 1, 0, 0, 1, 2, 2;
    const auto fused = fuse_semantic(seq(Mat::Zero(2, 2)), seq(sem, 8.0));
    EXPECT_EQ(fused.data, Mat::Constant(2, 2, 1.0));
}

TEST(FuseSemantic, LinearInSync) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Mat a = testing::random_mat(6, 4, rng);
        const Mat b = testing::random_mat(6, 4, rng);
        const auto s = seq(testing::random_mat(3, 4, rng), 8.0);
        const Mat lhs = fuse_semantic(seq(a + b), s).data;
        const Mat rhs = fuse_semantic(seq(a), s).data + b;
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(FuseSemantic, DimensionMismatch) {
    EXPECT_THROW(fuse_semantic(seq(Mat::Zero(2, 3)), seq(Mat::Zero(2, 4))), ShapeError);
}

TEST(Project, IdentityKernelSameLength) {
    Rng rng(3);
    const auto s = seq(testing::random_mat(7, 4, rng));
    const auto p = ProjectionBlockParams::identity(4, 7);
    EXPECT_EQ(project(s, p), s.data);
}

TEST(Project, IdentityKernelHalvesLength) {
    Rng rng(4);
    const auto s = seq(testing::random_mat(106, 5, rng));
    const Mat out = project(s, ProjectionBlockParams::identity(5, 53));
    ASSERT_EQ(out.rows(), 53);
    for (int i = 0; i < 53; ++i) {
        for (int c = 0; c < 5; ++c) {
            const double pair = (s.data(2 * i, c) + s.data(2 * i + 1, c)) / 2.0;
            EXPECT_NEAR(out(i, c), pair, 1e-15);
        }
    }
}

TEST(Project, IdentityKernelPreservesTimeAverage) {
    Rng rng(5);
    const auto s = seq(testing::random_mat(240, 3, rng));
    for (int T : {1, 2, 3, 8, 24, 48, 80, 120, 240}) {
        const Mat out = project(s, ProjectionBlockParams::identity(3, T));
        EXPECT_LT((out.colwise().mean() - s.data.colwise().mean()).cwiseAbs().maxCoeff(), 1e-13) << "T=" << T;
    }
}

TEST(Project, ConstantInputConstantOutput) {
    const auto s = seq(Mat::Constant(240, 3, 0.75));
    const Mat out = project(s, ProjectionBlockParams::identity(3, 53, 3));
    // zero padding only touches the first and last frames; interior bins stay exact
    for (int i = 1; i < 52; ++i) {
        for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out(i, c), 0.75);
    }
}

TEST(Project, AdaptiveBinsCoverInput) {
    for (int t : {240, 53, 100, 7}) {
        for (int T : {1, 5, 53}) {
            int prev_begin = -1;
            for (int i = 0; i < T; ++i) {
                const auto b = adaptive_bin(i, t, T);
                EXPECT_GE(b.begin, prev_begin);
                EXPECT_LT(b.begin, b.end);
                prev_begin = b.begin;
            }
            EXPECT_EQ(adaptive_bin(0, t, T).begin, 0);
            EXPECT_EQ(adaptive_bin(T - 1, t, T).end, t);
        }
    }
    // 240 -> 53: bin 0 = [0, 5), bin 1 = [4, 10)
    EXPECT_EQ(adaptive_bin(0, 240, 53).end, 5);
    EXPECT_EQ(adaptive_bin(1, 240, 53).begin, 4);
    EXPECT_EQ(adaptive_bin(1, 240, 53).end, 10);
}

TEST(Project, ConvMatchesDirectLoop) {
    Rng rng(6);
    const auto s = seq(testing::random_mat(20, 3, rng));
    auto p = ProjectionBlockParams::zeros(3, 3, 4, 20);
    p.kernel = testing::random_mat(9, 4, rng);
    p.bias = testing::random_mat(1, 4, rng);
    const Mat out = project(s, p);
    for (int t = 0; t < 20; ++t) {
        for (int o = 0; o < 4; ++o) {
            double acc = p.bias(0, o);
            for (int j = 0; j < 3; ++j) {
                const int src = t + j - 1;
                if (src < 0 || src >= 20) continue;
                for (int c = 0; c < 3; ++c) acc += s.data(src, c) * p.kernel(j * 3 + c, o);
            }
            EXPECT_NEAR(out(t, o), acc, 1e-13);
        }
    }
}

TEST(Project, ConfigErrors) {
    const auto s = seq(Mat::Zero(10, 2));
    auto p = ProjectionBlockParams::identity(2, 5);
    p.target_len = 0;
    EXPECT_THROW(project(s, p), ConfigError);
    auto even = ProjectionBlockParams::zeros(2, 2, 2, 5);
    EXPECT_THROW(project(s, even), ConfigError);
}

TEST(LiftToGrid, ShapeAndFrequencyConstancy) {
    Rng rng(7);
    const auto s = seq(testing::random_mat(240, 768, rng, 0.3));
    auto p = ProjectionBlockParams::zeros(3, 768, 768, 53);
    p.kernel = testing::random_mat(3 * 768, 768, rng, 0.02);
    const Mat projected = project(s, p);
    ASSERT_EQ(projected.rows(), 53);
    const auto grid = lift_to_grid(projected, 5);
    EXPECT_EQ(grid.F, 5);
    EXPECT_EQ(grid.T, 53);
    EXPECT_EQ(grid.dim(), 768);
    EXPECT_TRUE(grid.frequency_constant());
    for (int f = 0; f < 5; ++f) EXPECT_EQ(grid.slice(f), projected);
}

TEST(LiftToGrid, SingleRowAndDistinctColumns) {
    Mat s(2, 2);
    s << 1, 2, 3, 4;
    const auto g1 = lift_to_grid(s, 1);
    EXPECT_EQ(g1.data, s);
    const auto g3 = lift_to_grid(s, 3);
    EXPECT_NE(g3.at(1, 0), g3.at(1, 1));
    EXPECT_THROW(lift_to_grid(s, 0), ArgumentError);
}

TEST(LiftToGrid, BackwardIsAdjoint) {
    Rng rng(8);
    const Mat s = testing::random_mat(6, 3, rng);
    const Mat d = testing::random_mat(4 * 6, 3, rng);
    const double lhs = lift_to_grid(s, 4).data.cwiseProduct(d).sum();
    const double rhs = s.cwiseProduct(lift_backward(d, 4, 6)).sum();
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

}  // namespace
}  // namespace smfoley
