#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "smfoley/common.hpp"
#include "smfoley/nn.hpp"
#include "smfoley/token_space.hpp"

namespace smfoley {

struct ModelConfig {
    int depth = 24;
    int dim = 768;
    int heads = 12;
    int ff_dim = 3072;
    int vocab = 1024;
    PatchGeometry geometry{};
    int condition_dim = 512;

    void validate() const {
        if (depth < 0 || depth % 2 != 0) throw ConfigError("model depth must be even and >= 0");
        if (dim < 1 || heads < 1 || ff_dim < 1 || vocab < 2 || condition_dim < 1) {
            throw ConfigError("model sizes must be positive (vocab >= 2)");
        }
        if (dim % heads != 0) {
            throw ConfigError("model dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
        }
        try {
            geometry.validate();
        } catch (const GeometryError& e) {
            throw ConfigError(e.what());
        }
    }

    int F() const { return geometry.F(); }
    int T() const { return geometry.T(); }
    int positions() const { return geometry.positions(); }

    bool operator==(const ModelConfig&) const = default;
};

/// Prompt condition. When `is_unconditional` is set the backbone substitutes its learned mask embedding.
struct ConditionEmbedding {
    Mat vector;  // 1 x condition_dim
    bool is_unconditional = false;

    static ConditionEmbedding prompt(Mat v) { return {std::move(v), false}; }
};

/// Per-position logits, (F*T) x V with row index f*T + t.
struct LogitsGrid {
    int F = 0;
    int T = 0;
    Mat data;

    int vocab() const { return static_cast<int>(data.cols()); }
};

struct BackboneParams {
    ModelConfig config;
    Mat tok_emb;     // (V+1) x D, last row embeds MASK
    Mat pos_f;       // F x D
    Mat pos_t;       // T x D
    Mat cond_w;      // condition_dim x D
    Mat cond_b;      // 1 x D
    Mat uncond_emb;  // 1 x condition_dim, the learned unconditional mask C
    std::vector<nn::BlockParams> blocks;
    Mat lnf_g, lnf_b;
    Mat head_w;  // D x V
    Mat head_b;  // 1 x V

    template <class Fn>
    void visit(Fn&& fn) { visit_impl(*this, fn); }
    template <class Fn>
    void visit(Fn&& fn) const { visit_impl(*this, fn); }

    /// Same shapes, all zeros; used as the gradient accumulator.
    BackboneParams zeros_like() const {
        BackboneParams z = *this;
        z.visit([](const std::string&, Mat& m) { m.setZero(); });
        return z;
    }

    ConditionEmbedding unconditional() const { return {uncond_emb, true}; }

    long long parameter_count() const {
        long long n = 0;
        visit([&](const std::string&, const Mat& m) { n += m.size(); });
        return n;
    }

private:
    template <class Self, class Fn>
    static void visit_impl(Self& s, Fn& fn) {
        fn("tok_emb", s.tok_emb);
        fn("pos_f", s.pos_f);
        fn("pos_t", s.pos_t);
        fn("cond_w", s.cond_w);
        fn("cond_b", s.cond_b);
        fn("uncond_emb", s.uncond_emb);
        for (std::size_t i = 0; i < s.blocks.size(); ++i) {
            const std::string prefix = "block" + std::to_string(i) + ".";
            s.blocks[i].visit([&](const char* name, auto& m) { fn(prefix + name, m); });
        }
        fn("lnf_g", s.lnf_g);
        fn("lnf_b", s.lnf_b);
        fn("head_w", s.head_w);
        fn("head_b", s.head_b);
    }
};

/// Closed-form parameter count for a configuration.
inline long long backbone_parameter_count(const ModelConfig& c) {
    const long long D = c.dim;
    return (c.vocab + 1LL) * D + static_cast<long long>(c.F()) * D + static_cast<long long>(c.T()) * D +
           static_cast<long long>(c.condition_dim) * D + D + c.condition_dim +
           c.depth * nn::BlockParams::count(D, c.ff_dim) + 2 * D + D * c.vocab + c.vocab;
}

namespace detail {

inline void fill_normal(Mat& m, Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
}

inline nn::BlockParams init_block(int dim, int ff_dim, int depth, Rng& rng) {
    auto p = nn::BlockParams::zeros(dim, ff_dim);
    const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(depth, 1));
    p.ln1_g.setOnes();
    p.ln2_g.setOnes();
    fill_normal(p.w_qkv, rng, 1.0 / std::sqrt(dim));
    fill_normal(p.w_o, rng, residual_scale / std::sqrt(dim));
    fill_normal(p.w1, rng, 1.0 / std::sqrt(dim));
    fill_normal(p.w2, rng, residual_scale / std::sqrt(ff_dim));
    return p;
}

}  // namespace detail

/// Scaled-normal initialization; biases (including the MLM head bias) start at zero.
inline BackboneParams init_backbone(const ModelConfig& config, Rng& rng) {
    config.validate();
    const int D = config.dim;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(D));
    BackboneParams p;
    p.config = config;
    p.tok_emb = Mat(config.vocab + 1, D);
    p.pos_f = Mat(config.F(), D);
    p.pos_t = Mat(config.T(), D);
    p.cond_w = Mat(config.condition_dim, D);
    p.cond_b = Mat::Zero(1, D);
    p.uncond_emb = Mat(1, config.condition_dim);
    detail::fill_normal(p.tok_emb, rng, 1.0);
    detail::fill_normal(p.pos_f, rng, emb_std * 4.0);
    detail::fill_normal(p.pos_t, rng, emb_std * 4.0);
    detail::fill_normal(p.cond_w, rng, 1.0);
    detail::fill_normal(p.uncond_emb, rng, 1.0 / std::sqrt(static_cast<double>(config.condition_dim)));
    for (int i = 0; i < config.depth; ++i) p.blocks.push_back(detail::init_block(D, config.ff_dim, config.depth, rng));
    p.lnf_g = Mat::Ones(1, D);
    p.lnf_b = Mat::Zero(1, D);
    p.head_w = Mat(D, config.vocab);
    detail::fill_normal(p.head_w, rng, 1.0 / std::sqrt(static_cast<double>(D)));
    p.head_b = Mat::Zero(1, config.vocab);
    return p;
}

inline void check_input(const ModelConfig& c, const MaskedTokenMap& input, const ConditionEmbedding& cond) {
    if (input.tokens.F != c.F() || input.tokens.T != c.T() || input.tokens.vocab != c.vocab ||
        input.tokens.ids.size() != static_cast<std::size_t>(c.positions()) ||
        input.mask.size() != input.tokens.ids.size()) {
        throw ShapeError("token map does not match the model geometry/vocabulary");
    }
    if (!cond.is_unconditional && (cond.vector.rows() != 1 || cond.vector.cols() != c.condition_dim)) {
        throw ShapeError("condition vector must be 1 x " + std::to_string(c.condition_dim));
    }
}

// ---------------------------------------------------------------------------
// Embedding and MLM head, shared by the plain and controlled passes.

struct EmbedCache {
    std::vector<std::int32_t> ids;
    Mat cond_in;  // the condition vector actually used
    bool unconditional = false;
};

inline Mat embed(const BackboneParams& p, const MaskedTokenMap& input, const ConditionEmbedding& cond, EmbedCache* cache) {
    const auto& c = p.config;
    check_input(c, input, cond);
    const int T = c.T();
    Mat x(c.positions(), c.dim);
    const Mat& cond_in = cond.is_unconditional ? p.uncond_emb : cond.vector;
    const RowVec cond_row = nn::linear(cond_in, p.cond_w, p.cond_b).row(0);
    for (int n = 0; n < c.positions(); ++n) {
        const int id = input.mask[n] ? c.vocab : input.tokens.ids[n];
        if (id < 0 || id > c.vocab) throw ArgumentError("token id out of range in forward");
        x.row(n) = p.tok_emb.row(id) + p.pos_f.row(n / T) + p.pos_t.row(n % T) + cond_row;
    }
    if (cache) {
        cache->ids.resize(static_cast<std::size_t>(c.positions()));
        for (int n = 0; n < c.positions(); ++n) cache->ids[n] = input.mask[n] ? c.vocab : input.tokens.ids[n];
        cache->cond_in = cond_in;
        cache->unconditional = cond.is_unconditional;
    }
    return x;
}

/// Accumulates embedding-side gradients; returns dL/d(condition vector).
inline Mat embed_backward(const BackboneParams& p, const EmbedCache& cache, const Mat& dx, BackboneParams& g) {
    const int T = p.config.T();
    for (int n = 0; n < static_cast<int>(dx.rows()); ++n) {
        g.tok_emb.row(cache.ids[n]) += dx.row(n);
        g.pos_f.row(n / T) += dx.row(n);
        g.pos_t.row(n % T) += dx.row(n);
    }
    const Mat dcond_row = dx.colwise().sum();
    g.cond_b += dcond_row;
    g.cond_w.noalias() += cache.cond_in.transpose() * dcond_row;
    Mat dcond = dcond_row * p.cond_w.transpose();
    if (cache.unconditional) g.uncond_emb += dcond;
    return dcond;
}

struct HeadCache {
    Mat h;  // trunk output
    nn::LayerNormCache lnf;
    Mat hn;
};

inline Mat head_forward(const BackboneParams& p, const Mat& h, HeadCache* cache) {
    nn::LayerNormCache lnf;
    Mat hn = nn::layer_norm(h, p.lnf_g, p.lnf_b, cache ? &lnf : nullptr);
    Mat logits = nn::linear(hn, p.head_w, p.head_b);
    if (cache) {
        cache->h = h;
        cache->lnf = std::move(lnf);
        cache->hn = std::move(hn);
    }
    return logits;
}

inline Mat head_backward(const BackboneParams& p, const HeadCache& cache, const Mat& dlogits, BackboneParams* g) {
    Mat dhn = nn::linear_backward(cache.hn, p.head_w, dlogits, g ? &g->head_w : nullptr, g ? &g->head_b : nullptr);
    return nn::layer_norm_backward(cache.lnf, p.lnf_g, dhn, g ? &g->lnf_g : nullptr, g ? &g->lnf_b : nullptr);
}

// ---------------------------------------------------------------------------

struct BackboneCache {
    EmbedCache embed;
    std::vector<nn::BlockCache> blocks;
    HeadCache head;
};

inline LogitsGrid forward(const BackboneParams& p, const MaskedTokenMap& input, const ConditionEmbedding& cond,
                          BackboneCache* cache = nullptr) {
    Mat h = embed(p, input, cond, cache ? &cache->embed : nullptr);
    if (cache) cache->blocks.resize(p.blocks.size());
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        h = nn::block_forward(p.blocks[i], h, p.config.heads, cache ? &cache->blocks[i] : nullptr);
    }
    return {p.config.F(), p.config.T(), head_forward(p, h, cache ? &cache->head : nullptr)};
}

/// Full reverse pass of `forward`; returns dL/d(condition vector).
inline Mat backward(const BackboneParams& p, const BackboneCache& cache, const Mat& dlogits, BackboneParams& g) {
    Mat dh = head_backward(p, cache.head, dlogits, &g);
    for (std::size_t i = p.blocks.size(); i-- > 0;) {
        dh = nn::block_backward(p.blocks[i], cache.blocks[i], dh, p.config.heads, &g.blocks[i]);
    }
    return embed_backward(p, cache.embed, dh, g);
}

// ---------------------------------------------------------------------------
// Masked cross-entropy.

inline double log_sum_exp(const Eigen::Ref<const RowVec>& row) {
    const double mx = row.maxCoeff();
    return mx + std::log((row.array() - mx).exp().sum());
}

inline void check_loss_inputs(const LogitsGrid& logits, const TokenMap& targets, const std::vector<std::uint8_t>& mask) {
    if (logits.data.rows() != targets.size() || mask.size() != targets.ids.size() || logits.vocab() != targets.vocab) {
        throw ShapeError("mlm_loss: logits, targets and mask disagree in shape");
    }
}

/// Mean cross-entropy over masked positions.
inline double mlm_loss(const LogitsGrid& logits, const TokenMap& targets, const std::vector<std::uint8_t>& mask) {
    check_loss_inputs(logits, targets, mask);
    double total = 0.0;
    int count = 0;
    for (int n = 0; n < targets.size(); ++n) {
        if (!mask[n]) continue;
        total += log_sum_exp(logits.data.row(n)) - logits.data(n, targets.ids[n]);
        ++count;
    }
    if (count == 0) throw DegenerateInputError("mlm_loss: no masked positions");
    const double loss = total / count;
    if (!std::isfinite(loss)) throw NumericError("mlm_loss: non-finite loss");
    return loss;
}

/// Gradient of mlm_loss with respect to the logits, scaled by `weight`.
inline Mat mlm_loss_grad(const LogitsGrid& logits, const TokenMap& targets, const std::vector<std::uint8_t>& mask,
                         double weight = 1.0) {
    check_loss_inputs(logits, targets, mask);
    const int count = static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    if (count == 0) throw DegenerateInputError("mlm_loss: no masked positions");
    Mat d = Mat::Zero(logits.data.rows(), logits.data.cols());
    const double scale = weight / count;
    for (int n = 0; n < targets.size(); ++n) {
        if (!mask[n]) continue;
        const double lse = log_sum_exp(logits.data.row(n));
        d.row(n) = (logits.data.row(n).array() - lse).exp() * scale;
        d(n, targets.ids[n]) -= scale;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Batched gradient of the plain backbone.

struct MlmExample {
    MaskedTokenMap input;
    TokenMap target;
    ConditionEmbedding cond;
};

struct BackboneGradient {
    double loss = 0.0;
    BackboneParams grads;
    std::vector<Mat> dcond;  // per example, dL/d(condition vector)
};

/// Mean masked cross-entropy over the batch and its gradient.
inline BackboneGradient grad(const BackboneParams& p, const std::vector<MlmExample>& batch) {
    if (batch.empty()) throw DegenerateInputError("grad: empty batch");
    BackboneGradient out{0.0, p.zeros_like(), {}};
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        BackboneCache cache;
        const auto logits = forward(p, ex.input, ex.cond, &cache);
        out.loss += w * mlm_loss(logits, ex.target, ex.input.mask);
        out.dcond.push_back(backward(p, cache, mlm_loss_grad(logits, ex.target, ex.input.mask, w), out.grads));
    }
    return out;
}

inline double batch_loss(const BackboneParams& p, const std::vector<MlmExample>& batch) {
    if (batch.empty()) throw DegenerateInputError("batch_loss: empty batch");
    double loss = 0.0;
    for (const auto& ex : batch) loss += mlm_loss(forward(p, ex.input, ex.cond), ex.target, ex.input.mask);
    return loss / static_cast<double>(batch.size());
}

}  // namespace smfoley
