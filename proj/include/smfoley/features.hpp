#pragma once

#include <string>

#include "smfoley/common.hpp"

namespace smfoley {

/// t x d temporal feature sequence sampled at `frame_rate` Hz.
struct ControlFeatureSequence {
    Mat data;
    double frame_rate = 0.0;

    int length() const { return static_cast<int>(data.rows()); }
    int dim() const { return static_cast<int>(data.cols()); }

    void validate() const {
        if (data.rows() < 1) throw ShapeError("feature sequence must have at least one frame");
        if (!data.allFinite()) throw NumericError("feature sequence has non-finite entries");
    }

    bool operator==(const ControlFeatureSequence& o) const {
        return frame_rate == o.frame_rate && data.rows() == o.data.rows() && data.cols() == o.data.cols() &&
               data == o.data;
    }
};

/// Adds the time-mean of the semantic sequence to every frame of the sync sequence.
inline ControlFeatureSequence fuse_semantic(const ControlFeatureSequence& sync, const ControlFeatureSequence& semantic) {
    sync.validate();
    semantic.validate();
    if (sync.dim() != semantic.dim()) {
        throw ShapeError("fuse_semantic: sync dim " + std::to_string(sync.dim()) + " != semantic dim " +
                         std::to_string(semantic.dim()));
    }
    const RowVec global = semantic.data.colwise().sum() / static_cast<double>(semantic.length());
    ControlFeatureSequence out = sync;
    out.data.rowwise() += global;
    return out;
}

/// 1-D convolution over time (odd kernel, zero padding) followed by adaptive average pooling.
/// The kernel is stored im2col-style: row (j * in_dim + c) holds the weights of tap j, input channel c.
struct ProjectionBlockParams {
    int kernel_size = 3;
    int in_dim = 0;
    int out_dim = 0;
    int target_len = 0;
    Mat kernel;  // (kernel_size * in_dim) x out_dim
    Mat bias;    // 1 x out_dim

    void validate() const {
        if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("projection kernel size must be odd and >= 1");
        if (target_len < 1) throw ConfigError("projection target length must be >= 1");
        require_shape(kernel, static_cast<Eigen::Index>(kernel_size) * in_dim, out_dim, "projection kernel");
        require_shape(bias, 1, out_dim, "projection bias");
    }

    static ProjectionBlockParams zeros(int kernel_size, int in_dim, int out_dim, int target_len) {
        ProjectionBlockParams p;
        p.kernel_size = kernel_size;
        p.in_dim = in_dim;
        p.out_dim = out_dim;
        p.target_len = target_len;
        p.kernel = Mat::Zero(static_cast<Eigen::Index>(kernel_size) * in_dim, out_dim);
        p.bias = Mat::Zero(1, out_dim);
        return p;
    }

    /// Kernel that copies input channel c to output channel c through the centre tap.
    static ProjectionBlockParams identity(int dim, int target_len, int kernel_size = 1) {
        auto p = zeros(kernel_size, dim, dim, target_len);
        const int centre = kernel_size / 2;
        for (int c = 0; c < dim; ++c) p.kernel(centre * dim + c, c) = 1.0;
        return p;
    }
};

struct PoolBin {
    int begin;
    int end;  // exclusive
};

/// Adaptive-pool bin i covers [floor(i*t/T), ceil((i+1)*t/T)).
inline PoolBin adaptive_bin(int i, int in_len, int out_len) {
    const long long lo = static_cast<long long>(i) * in_len / out_len;
    const long long hi = (static_cast<long long>(i + 1) * in_len + out_len - 1) / out_len;
    return {static_cast<int>(lo), static_cast<int>(hi)};
}

inline Mat adaptive_avg_pool(const Mat& x, int out_len) {
    if (out_len < 1) throw ConfigError("adaptive pooling needs an output length >= 1");
    const int in_len = static_cast<int>(x.rows());
    Mat out(out_len, x.cols());
    for (int i = 0; i < out_len; ++i) {
        const auto bin = adaptive_bin(i, in_len, out_len);
        out.row(i) = x.middleRows(bin.begin, bin.end - bin.begin).colwise().sum() / static_cast<double>(bin.end - bin.begin);
    }
    return out;
}

/// Unfolds a zero-padded sequence so that the convolution becomes one matrix product.
inline Mat im2col(const Mat& x, int kernel_size) {
    const int t = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    const int pad = (kernel_size - 1) / 2;
    Mat cols = Mat::Zero(t, static_cast<Eigen::Index>(kernel_size) * d);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < kernel_size; ++j) {
            const int src = i + j - pad;
            if (src >= 0 && src < t) cols.block(i, static_cast<Eigen::Index>(j) * d, 1, d) = x.row(src);
        }
    }
    return cols;
}

struct ProjectionCache {
    Mat cols;
    int in_len = 0;
};

inline Mat project(const ControlFeatureSequence& seq, const ProjectionBlockParams& params, ProjectionCache* cache = nullptr) {
    params.validate();
    seq.validate();
    if (seq.dim() != params.in_dim) throw ShapeError("project: feature dim does not match the projection kernel");
    Mat cols = im2col(seq.data, params.kernel_size);
    Mat conv = cols * params.kernel;
    conv.rowwise() += params.bias.row(0);
    Mat out = adaptive_avg_pool(conv, params.target_len);
    if (cache) {
        cache->cols = std::move(cols);
        cache->in_len = seq.length();
    }
    return out;
}

/// Accumulates kernel/bias gradients given the gradient of the pooled T x D output.
inline void project_backward(const ProjectionCache& cache, const Mat& d_out, const ProjectionBlockParams& params,
                             ProjectionBlockParams& grads) {
    Mat d_conv = Mat::Zero(cache.in_len, params.out_dim);
    for (int i = 0; i < params.target_len; ++i) {
        const auto bin = adaptive_bin(i, cache.in_len, params.target_len);
        const RowVec share = d_out.row(i) / static_cast<double>(bin.end - bin.begin);
        for (int r = bin.begin; r < bin.end; ++r) d_conv.row(r) += share;
    }
    grads.kernel.noalias() += cache.cols.transpose() * d_conv;
    grads.bias += d_conv.colwise().sum();
}

/// F x T x D control tensor stored as (F*T) x D with row index f*T + t.
struct AlignedControlGrid {
    int F = 0;
    int T = 0;
    Mat data;

    int dim() const { return static_cast<int>(data.cols()); }
    auto at(int f, int t) const { return data.row(static_cast<Eigen::Index>(f) * T + t); }

    bool frequency_constant() const {
        for (int f = 1; f < F; ++f) {
            if (data.middleRows(static_cast<Eigen::Index>(f) * T, T) != data.topRows(T)) return false;
        }
        return true;
    }

    /// The T x D slice at one frequency row.
    Mat slice(int f) const { return data.middleRows(static_cast<Eigen::Index>(f) * T, T); }
};

/// Repeats a T x D sequence along a new frequency axis of size F.
inline AlignedControlGrid lift_to_grid(const Mat& seq, int F) {
    if (F < 1) throw ArgumentError("lift_to_grid: F must be >= 1");
    AlignedControlGrid g;
    g.F = F;
    g.T = static_cast<int>(seq.rows());
    g.data.resize(static_cast<Eigen::Index>(F) * g.T, seq.cols());
    for (int f = 0; f < F; ++f) g.data.middleRows(static_cast<Eigen::Index>(f) * g.T, g.T) = seq;
    return g;
}

/// Adjoint of lift_to_grid: sums the frequency rows.
inline Mat lift_backward(const Mat& d_grid, int F, int T) {
    Mat d_seq = Mat::Zero(T, d_grid.cols());
    for (int f = 0; f < F; ++f) d_seq += d_grid.middleRows(static_cast<Eigen::Index>(f) * T, T);
    return d_seq;
}

}  // namespace smfoley
