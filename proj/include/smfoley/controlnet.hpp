#pragma once

#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/features.hpp"
#include "smfoley/nn.hpp"

namespace smfoley {

/// Fingerprint of the backbone weights; a ControlNet records it when it is built.
inline std::uint64_t backbone_hash(const BackboneParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    p.visit([&](const std::string& name, const Mat& m) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
    });
    return h;
}

/// Trainable branch: feature aligner, control input projector, copies of the first
/// `n_copy` backbone blocks, and one zero-initialized connector per copied block.
struct ControlNetParams {
    int n_copy = 0;
    std::uint64_t backbone_fingerprint = 0;
    ProjectionBlockParams aligner;
    Mat ctrl_w, ctrl_b;
    std::vector<nn::BlockParams> blocks;
    std::vector<Mat> conn_w, conn_b;

    template <class Fn>
    void visit(Fn&& fn) { visit_impl(*this, fn); }
    template <class Fn>
    void visit(Fn&& fn) const { visit_impl(*this, fn); }

    ControlNetParams zeros_like() const {
        ControlNetParams z = *this;
        z.visit([](const std::string&, Mat& m) { m.setZero(); });
        return z;
    }

    long long parameter_count() const {
        long long n = 0;
        visit([&](const std::string&, const Mat& m) { n += m.size(); });
        return n;
    }

private:
    template <class Self, class Fn>
    static void visit_impl(Self& s, Fn& fn) {
        fn("aligner.kernel", s.aligner.kernel);
        fn("aligner.bias", s.aligner.bias);
        fn("ctrl_w", s.ctrl_w);
        fn("ctrl_b", s.ctrl_b);
        for (std::size_t j = 0; j < s.blocks.size(); ++j) {
            const std::string prefix = "cblock" + std::to_string(j) + ".";
            s.blocks[j].visit([&](const char* name, auto& m) { fn(prefix + name, m); });
        }
        for (std::size_t j = 0; j < s.conn_w.size(); ++j) {
            fn("conn" + std::to_string(j) + ".w", s.conn_w[j]);
            fn("conn" + std::to_string(j) + ".b", s.conn_b[j]);
        }
    }
};

inline long long controlnet_parameter_count(const ModelConfig& c, int n_copy, int feature_dim, int kernel_size) {
    const long long D = c.dim;
    return static_cast<long long>(kernel_size) * feature_dim * D + D  // aligner
           + D * D + D                                               // control projector
           + n_copy * nn::BlockParams::count(D, c.ff_dim)            // copied blocks
           + n_copy * (D * D + D);                                   // connectors
}

/// Copies the first `n_copy` backbone blocks; connectors start at exactly zero.
inline ControlNetParams build_controlnet(const BackboneParams& backbone, int n_copy, int feature_dim, Rng& rng,
                                         int kernel_size = 3) {
    const auto& c = backbone.config;
    if (n_copy < 1 || n_copy > c.depth) {
        throw ConfigError("n_copy must lie in [1, " + std::to_string(c.depth) + "], got " + std::to_string(n_copy));
    }
    if (feature_dim < 1) throw ConfigError("feature dim must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("aligner kernel size must be odd");
    ControlNetParams p;
    p.n_copy = n_copy;
    p.backbone_fingerprint = backbone_hash(backbone);
    p.aligner = ProjectionBlockParams::zeros(kernel_size, feature_dim, c.dim, c.T());
    detail::fill_normal(p.aligner.kernel, rng, 1.0 / std::sqrt(static_cast<double>(kernel_size * feature_dim)));
    p.ctrl_w = Mat(c.dim, c.dim);
    detail::fill_normal(p.ctrl_w, rng, 1.0 / std::sqrt(static_cast<double>(c.dim)));
    p.ctrl_b = Mat::Zero(1, c.dim);
    p.blocks.assign(backbone.blocks.begin(), backbone.blocks.begin() + n_copy);
    for (int j = 0; j < n_copy; ++j) {
        p.conn_w.push_back(Mat::Zero(c.dim, c.dim));
        p.conn_b.push_back(Mat::Zero(1, c.dim));
    }
    return p;
}

inline void check_compatible(const BackboneParams& bb, const ControlNetParams& cn) {
    if (cn.n_copy < 1 || cn.n_copy > bb.config.depth || cn.blocks.size() != static_cast<std::size_t>(cn.n_copy) ||
        cn.ctrl_w.rows() != bb.config.dim || cn.aligner.out_dim != bb.config.dim || cn.aligner.target_len != bb.config.T()) {
        throw ShapeError("controlnet does not match the backbone configuration");
    }
}

struct AlignerCache {
    ProjectionCache projection;
};

/// FT alignment: conv + adaptive pool to T steps, then repeat over F frequency rows.
inline AlignedControlGrid align_features(const ControlNetParams& cn, const ControlFeatureSequence& seq, int F,
                                         AlignerCache* cache = nullptr) {
    return lift_to_grid(project(seq, cn.aligner, cache ? &cache->projection : nullptr), F);
}

struct ControlledCache {
    EmbedCache embed;
    Mat control;
    std::vector<nn::BlockCache> backbone_blocks;
    std::vector<nn::BlockCache> control_blocks;
    std::vector<Mat> control_out;
    HeadCache head;
};

inline LogitsGrid forward_controlled(const BackboneParams& bb, const ControlNetParams& cn, const MaskedTokenMap& input,
                                     const ConditionEmbedding& cond, const AlignedControlGrid& control,
                                     ControlledCache* cache = nullptr) {
    check_compatible(bb, cn);
    const auto& c = bb.config;
    if (control.F != c.F() || control.T != c.T() || control.dim() != c.dim ||
        control.data.rows() != static_cast<Eigen::Index>(c.positions())) {
        throw ShapeError("control grid does not match the model geometry");
    }
    const int heads = c.heads;
    Mat x0 = embed(bb, input, cond, cache ? &cache->embed : nullptr);
    Mat ctrl = x0 + nn::linear(control.data, cn.ctrl_w, cn.ctrl_b);
    Mat h = std::move(x0);
    if (cache) {
        cache->control = control.data;
        cache->backbone_blocks.resize(bb.blocks.size());
        cache->control_blocks.resize(static_cast<std::size_t>(cn.n_copy));
        cache->control_out.resize(static_cast<std::size_t>(cn.n_copy));
    }
    for (int j = 0; j < c.depth; ++j) {
        h = nn::block_forward(bb.blocks[j], h, heads, cache ? &cache->backbone_blocks[j] : nullptr);
        if (j < cn.n_copy) {
            ctrl = nn::block_forward(cn.blocks[j], ctrl, heads, cache ? &cache->control_blocks[j] : nullptr);
            h += nn::linear(ctrl, cn.conn_w[j], cn.conn_b[j]);
            if (cache) cache->control_out[j] = ctrl;
        }
    }
    return {c.F(), c.T(), head_forward(bb, h, cache ? &cache->head : nullptr)};
}

/// Reverse pass of forward_controlled. ControlNet gradients go to `cg`; backbone gradients
/// go to `bg` unless it is null (frozen backbone). Returns dL/d(control grid data).
inline Mat backward_controlled(const BackboneParams& bb, const ControlNetParams& cn, const ControlledCache& cache,
                               const Mat& dlogits, ControlNetParams& cg, BackboneParams* bg) {
    const auto& c = bb.config;
    const int heads = c.heads;
    Mat dh = head_backward(bb, cache.head, dlogits, bg);
    Mat dctrl = Mat::Zero(dh.rows(), dh.cols());
    for (int j = c.depth - 1; j >= 0; --j) {
        if (j < cn.n_copy) {
            dctrl += nn::linear_backward(cache.control_out[j], cn.conn_w[j], dh, &cg.conn_w[j], &cg.conn_b[j]);
            dctrl = nn::block_backward(cn.blocks[j], cache.control_blocks[j], dctrl, heads, &cg.blocks[j]);
        }
        // Below block 0 only the embedding remains; with a frozen backbone nothing there needs dh.
        if (bg || j > 0) {
            dh = nn::block_backward(bb.blocks[j], cache.backbone_blocks[j], dh, heads, bg ? &bg->blocks[j] : nullptr);
        }
    }
    Mat dcontrol = nn::linear_backward(cache.control, cn.ctrl_w, dctrl, &cg.ctrl_w, &cg.ctrl_b);
    if (bg) embed_backward(bb, cache.embed, dh + dctrl, *bg);
    return dcontrol;
}

// ---------------------------------------------------------------------------

struct ControlExample {
    MaskedTokenMap input;
    TokenMap target;
    ConditionEmbedding cond;
    ControlFeatureSequence control;  // fused 1-D features, aligned inside the pass
};

struct ControlledGradient {
    double loss = 0.0;
    ControlNetParams grads;
    BackboneParams backbone_grads;  // stays zero when the backbone is frozen
};

inline ControlledGradient grad_controlled(const BackboneParams& bb, const ControlNetParams& cn,
                                          const std::vector<ControlExample>& batch, bool backbone_trainable = false) {
    if (batch.empty()) throw DegenerateInputError("grad_controlled: empty batch");
    ControlledGradient out{0.0, cn.zeros_like(), bb.zeros_like()};
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        AlignerCache acache;
        const auto grid = align_features(cn, ex.control, bb.config.F(), &acache);
        ControlledCache cache;
        const auto logits = forward_controlled(bb, cn, ex.input, ex.cond, grid, &cache);
        out.loss += w * mlm_loss(logits, ex.target, ex.input.mask);
        const Mat dgrid = backward_controlled(bb, cn, cache, mlm_loss_grad(logits, ex.target, ex.input.mask, w),
                                              out.grads, backbone_trainable ? &out.backbone_grads : nullptr);
        project_backward(acache.projection, lift_backward(dgrid, grid.F, grid.T), cn.aligner, out.grads.aligner);
    }
    return out;
}

inline double controlled_batch_loss(const BackboneParams& bb, const ControlNetParams& cn,
                                    const std::vector<ControlExample>& batch) {
    if (batch.empty()) throw DegenerateInputError("controlled_batch_loss: empty batch");
    double loss = 0.0;
    for (const auto& ex : batch) {
        const auto grid = align_features(cn, ex.control, bb.config.F());
        loss += mlm_loss(forward_controlled(bb, cn, ex.input, ex.cond, grid), ex.target, ex.input.mask);
    }
    return loss / static_cast<double>(batch.size());
}

}  // namespace smfoley
