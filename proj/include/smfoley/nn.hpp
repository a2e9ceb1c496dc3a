#pragma once

#include <cmath>
#include <vector>

#include "smfoley/common.hpp"

// Layers with explicit forward/backward passes. Backward functions take a
// nullable gradient sink: passing nullptr propagates input gradients only,
// which is how frozen parameters are handled.

namespace smfoley::nn {

inline constexpr double kLayerNormEps = 1e-5;

inline Mat linear(const Mat& x, const Mat& w, const Mat& b) {
    Mat y(x.rows(), w.cols());
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
    return y;
}

/// dW += x^T dy, db += sum(dy); returns dx = dy W^T.
inline Mat linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat* dw, Mat* db, bool need_dx = true) {
    if (dw) dw->noalias() += x.transpose() * dy;
    if (db) *db += dy.colwise().sum();
    if (!need_dx) return {};
    Mat dx(dy.rows(), w.rows());
    dx.noalias() = dy * w.transpose();
    return dx;
}

struct LayerNormCache {
    Mat xhat;
    Vec rstd;
};

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, LayerNormCache* cache) {
    const auto n = x.rows();
    const double inv_d = 1.0 / static_cast<double>(x.cols());
    Mat xhat(n, x.cols());
    Vec rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).sum() * inv_d;
        const RowVec centred = x.row(i).array() - mean;
        const double var = centred.squaredNorm() * inv_d;
        rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = centred * rstd(i);
    }
    Mat y = xhat.array().rowwise() * gamma.row(0).array();
    y.rowwise() += beta.row(0);
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

inline Mat layer_norm_backward(const LayerNormCache& cache, const Mat& gamma, const Mat& dy, Mat* dgamma, Mat* dbeta) {
    if (dgamma) *dgamma += (dy.array() * cache.xhat.array()).matrix().colwise().sum();
    if (dbeta) *dbeta += dy.colwise().sum();
    const double inv_d = 1.0 / static_cast<double>(dy.cols());
    Mat dxhat = dy.array().rowwise() * gamma.row(0).array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double m1 = dxhat.row(i).sum() * inv_d;
        const double m2 = dxhat.row(i).dot(cache.xhat.row(i)) * inv_d;
        dx.row(i) = (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2) * cache.rstd(i);
    }
    return dx;
}

/// Standard normal CDF, elementwise.
inline Mat normal_cdf(const Mat& x) {
    return x.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)); });
}

/// Exact GELU, x * Phi(x), given Phi(x).
inline Mat gelu(const Mat& x, const Mat& cdf) { return x.cwiseProduct(cdf); }

inline Mat gelu(const Mat& x) { return gelu(x, normal_cdf(x)); }

inline Mat gelu_backward(const Mat& x, const Mat& cdf, const Mat& dy) {
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return ((cdf.array() + x.array() * inv_sqrt_2pi * (-0.5 * x.array().square()).exp()) * dy.array()).matrix();
}

inline Mat gelu_backward(const Mat& x, const Mat& dy) { return gelu_backward(x, normal_cdf(x), dy); }

/// In-place row softmax.
inline void softmax_rows(Mat& s) {
    const Vec mx = s.rowwise().maxCoeff();
    s.colwise() -= mx;
    s.array() = s.array().exp();
    const Vec inv = s.rowwise().sum().cwiseInverse();
    s.array().colwise() *= inv.array();
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
struct BlockParams {
    Mat ln1_g, ln1_b;
    Mat w_qkv, b_qkv;
    Mat w_o, b_o;
    Mat ln2_g, ln2_b;
    Mat w1, b1;
    Mat w2, b2;

    template <class Fn>
    void visit(Fn&& fn) { visit_impl(*this, fn); }
    template <class Fn>
    void visit(Fn&& fn) const { visit_impl(*this, fn); }

    static BlockParams zeros(int dim, int ff_dim) {
        BlockParams p;
        p.ln1_g = Mat::Zero(1, dim);
        p.ln1_b = Mat::Zero(1, dim);
        p.w_qkv = Mat::Zero(dim, 3 * dim);
        p.b_qkv = Mat::Zero(1, 3 * dim);
        p.w_o = Mat::Zero(dim, dim);
        p.b_o = Mat::Zero(1, dim);
        p.ln2_g = Mat::Zero(1, dim);
        p.ln2_b = Mat::Zero(1, dim);
        p.w1 = Mat::Zero(dim, ff_dim);
        p.b1 = Mat::Zero(1, ff_dim);
        p.w2 = Mat::Zero(ff_dim, dim);
        p.b2 = Mat::Zero(1, dim);
        return p;
    }

    static long long count(long long dim, long long ff_dim) {
        return 4 * dim                       // two layer norms
               + dim * 3 * dim + 3 * dim     // qkv
               + dim * dim + dim             // output projection
               + dim * ff_dim + ff_dim       // ffn in
               + ff_dim * dim + dim;         // ffn out
    }

private:
    template <class Self, class Fn>
    static void visit_impl(Self& s, Fn& fn) {
        fn("ln1_g", s.ln1_g);
        fn("ln1_b", s.ln1_b);
        fn("w_qkv", s.w_qkv);
        fn("b_qkv", s.b_qkv);
        fn("w_o", s.w_o);
        fn("b_o", s.b_o);
        fn("ln2_g", s.ln2_g);
        fn("ln2_b", s.ln2_b);
        fn("w1", s.w1);
        fn("b1", s.b1);
        fn("w2", s.w2);
        fn("b2", s.b2);
    }
};

struct BlockCache {
    Mat x;
    LayerNormCache ln1;
    Mat a;
    Mat qkv;
    std::vector<Mat> probs;
    Mat attn;
    Mat x1;
    LayerNormCache ln2;
    Mat c;
    Mat h;
    Mat cdf;
    Mat g;
};

inline Mat block_forward(const BlockParams& p, const Mat& x, int heads, BlockCache* cache) {
    const auto n = x.rows();
    const auto dim = x.cols();
    const auto dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    LayerNormCache ln1;
    Mat a = layer_norm(x, p.ln1_g, p.ln1_b, cache ? &ln1 : nullptr);
    Mat qkv = linear(a, p.w_qkv, p.b_qkv);

    Mat attn(n, dim);
    std::vector<Mat> probs;
    if (cache) probs.reserve(static_cast<std::size_t>(heads));
    Mat s(n, n);
    for (int h = 0; h < heads; ++h) {
        const auto q = qkv.middleCols(h * dh, dh);
        const auto k = qkv.middleCols(dim + h * dh, dh);
        const auto v = qkv.middleCols(2 * dim + h * dh, dh);
        s.noalias() = q * k.transpose();
        s *= scale;
        softmax_rows(s);
        attn.middleCols(h * dh, dh).noalias() = s * v;
        if (cache) probs.push_back(s);
    }

    Mat x1 = x + linear(attn, p.w_o, p.b_o);
    LayerNormCache ln2;
    Mat c = layer_norm(x1, p.ln2_g, p.ln2_b, cache ? &ln2 : nullptr);
    Mat h = linear(c, p.w1, p.b1);
    Mat cdf = normal_cdf(h);
    Mat g = gelu(h, cdf);
    Mat y = x1 + linear(g, p.w2, p.b2);

    if (cache) {
        cache->x = x;
        cache->ln1 = std::move(ln1);
        cache->a = std::move(a);
        cache->qkv = std::move(qkv);
        cache->probs = std::move(probs);
        cache->attn = std::move(attn);
        cache->x1 = std::move(x1);
        cache->ln2 = std::move(ln2);
        cache->c = std::move(c);
        cache->h = std::move(h);
        cache->cdf = std::move(cdf);
        cache->g = std::move(g);
    }
    return y;
}

/// Returns dL/dx. Parameter gradients are accumulated into `grads` unless it is null.
inline Mat block_backward(const BlockParams& p, const BlockCache& cache, const Mat& dy, int heads, BlockParams* grads) {
    const auto n = dy.rows();
    const auto dim = dy.cols();
    const auto dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // FFN branch
    Mat dg = linear_backward(cache.g, p.w2, dy, grads ? &grads->w2 : nullptr, grads ? &grads->b2 : nullptr);
    Mat dh_pre = gelu_backward(cache.h, cache.cdf, dg);
    Mat dc = linear_backward(cache.c, p.w1, dh_pre, grads ? &grads->w1 : nullptr, grads ? &grads->b1 : nullptr);
    Mat dx1 = dy + layer_norm_backward(cache.ln2, p.ln2_g, dc, grads ? &grads->ln2_g : nullptr,
                                       grads ? &grads->ln2_b : nullptr);

    // attention branch
    Mat dattn = linear_backward(cache.attn, p.w_o, dx1, grads ? &grads->w_o : nullptr, grads ? &grads->b_o : nullptr);
    Mat dqkv(n, 3 * dim);
    Mat dp(n, n);
    for (int h = 0; h < heads; ++h) {
        const auto q = cache.qkv.middleCols(h * dh, dh);
        const auto k = cache.qkv.middleCols(dim + h * dh, dh);
        const auto v = cache.qkv.middleCols(2 * dim + h * dh, dh);
        const Mat& prob = cache.probs[static_cast<std::size_t>(h)];
        const auto dout = dattn.middleCols(h * dh, dh);

        dqkv.middleCols(2 * dim + h * dh, dh).noalias() = prob.transpose() * dout;
        dp.noalias() = dout * v.transpose();
        const Vec rowdot = (dp.array() * prob.array()).rowwise().sum();
        dp = (prob.array() * (dp.array().colwise() - rowdot.array())) * scale;
        dqkv.middleCols(h * dh, dh).noalias() = dp * k;
        dqkv.middleCols(dim + h * dh, dh).noalias() = dp.transpose() * q;
    }
    Mat da = linear_backward(cache.a, p.w_qkv, dqkv, grads ? &grads->w_qkv : nullptr, grads ? &grads->b_qkv : nullptr);
    return dx1 + layer_norm_backward(cache.ln1, p.ln1_g, da, grads ? &grads->ln1_g : nullptr,
                                     grads ? &grads->ln1_b : nullptr);
}

}  // namespace smfoley::nn
