#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "smfoley/backbone.hpp"
#include "smfoley/controlnet.hpp"
#include "smfoley/sampler.hpp"
#include "smfoley/synthetic_data.hpp"

namespace smfoley {

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian summaries.

struct GaussianSummary {
    Vec mean;
    Mat cov;
    long count = 0;

    void validate() const {
        if (count < 2) throw DegenerateInputError("Gaussian summary needs at least two samples");
        if (cov.rows() != mean.size() || cov.cols() != mean.size()) throw ShapeError("covariance does not match mean");
        if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw NumericError("covariance is not symmetric");
    }
};

/// Mean and unbiased covariance of the rows of `samples`.
inline GaussianSummary summarize(const Mat& samples) {
    if (samples.rows() < 2) throw DegenerateInputError("summarize: need at least two samples");
    GaussianSummary s;
    s.count = static_cast<long>(samples.rows());
    s.mean = samples.colwise().mean().transpose();
    const Mat centred = samples.rowwise() - s.mean.transpose();
    s.cov = (centred.transpose() * centred) / static_cast<double>(samples.rows() - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
    return s;
}

namespace detail {

inline constexpr double kPsdTolerance = -1e-10;

/// Eigenvalues of a symmetric matrix, with tiny negatives clamped to zero.
inline Eigen::SelfAdjointEigenSolver<Mat> psd_eigen(const Mat& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw NumericError(std::string(what) + ": eigendecomposition failed");
    if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < kPsdTolerance) {
        throw NumericError(std::string(what) + " is not positive semi-definite");
    }
    return es;
}

inline Mat psd_sqrt(const Mat& m, const char* what) {
    const auto es = psd_eigen(m, what);
    const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// |mu_a - mu_b|^2 + Tr(S_a + S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2).
inline double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
    a.validate();
    b.validate();
    if (a.mean.size() != b.mean.size()) throw ShapeError("frechet_distance: dimension mismatch");
    detail::psd_eigen(b.cov, "covariance b");
    const Mat root_a = detail::psd_sqrt(a.cov, "covariance a");
    const Mat inner = root_a * b.cov * root_a;
    const auto es = detail::psd_eigen(inner, "covariance product");
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double fd = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    return std::max(fd, 0.0);
}

// ---------------------------------------------------------------------------
// Token-map analysis.

/// Majority label of each time column: a class id, or -1 for background. Ties go to background,
/// then to the lower class id.
inline std::vector<int> column_labels(const TokenMap& map, const DatasetConfig& config) {
    std::vector<int> labels(static_cast<std::size_t>(map.T), -1);
    std::vector<int> counts(static_cast<std::size_t>(config.classes) + 1);
    for (int t = 0; t < map.T; ++t) {
        std::fill(counts.begin(), counts.end(), 0);
        for (int f = 0; f < map.F; ++f) ++counts[static_cast<std::size_t>(class_of_token(map.at(f, t), config) + 1)];
        int best = 0;
        for (std::size_t i = 1; i < counts.size(); ++i) {
            if (counts[i] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
        }
        labels[static_cast<std::size_t>(t)] = best - 1;
    }
    return labels;
}

/// Toy embedder: per-class fraction of time columns, plus the background fraction in the last bin.
inline Vec embed_tokens(const TokenMap& map, const DatasetConfig& config) {
    Vec e = Vec::Zero(config.classes + 1);
    for (int label : column_labels(map, config)) e(label < 0 ? config.classes : label) += 1.0;
    return e / static_cast<double>(map.T);
}

struct DetectedOnset {
    int cls;
    int column;
};

/// First column of every maximal run of same-class columns.
inline std::vector<DetectedOnset> detect_onsets(const TokenMap& map, const DatasetConfig& config) {
    const auto labels = column_labels(map, config);
    std::vector<DetectedOnset> out;
    for (int t = 0; t < static_cast<int>(labels.size()); ++t) {
        const int l = labels[static_cast<std::size_t>(t)];
        if (l >= 0 && (t == 0 || labels[static_cast<std::size_t>(t - 1)] != l)) out.push_back({l, t});
    }
    return out;
}

/// Mean onset misalignment in seconds. Ground-truth onsets are compared at column resolution;
/// detections are matched greedily (closest same-class pair first); every unmatched ground-truth
/// event costs clip_length / 2.
inline double toy_desync(const TokenMap& generated, const SyntheticScene& scene, const DatasetConfig& config) {
    if (scene.events.empty()) return 0.0;
    const auto detected = detect_onsets(generated, config);
    const double width = scene.clip_length / generated.T;

    std::vector<std::tuple<int, std::size_t, std::size_t>> pairs;  // (column gap, gt, det)
    for (std::size_t i = 0; i < scene.events.size(); ++i) {
        const int gt_col = event_columns(scene.events[i], generated.T, scene.clip_length).begin;
        for (std::size_t j = 0; j < detected.size(); ++j) {
            if (detected[j].cls == scene.events[i].cls) pairs.emplace_back(std::abs(detected[j].column - gt_col), i, j);
        }
    }
    std::sort(pairs.begin(), pairs.end());
    std::vector<bool> gt_used(scene.events.size(), false);
    std::vector<bool> det_used(detected.size(), false);
    double total = 0.0;
    std::size_t matched = 0;
    for (const auto& [gap, i, j] : pairs) {
        if (gt_used[i] || det_used[j]) continue;
        gt_used[i] = det_used[j] = true;
        total += gap * width;
        ++matched;
    }
    total += static_cast<double>(scene.events.size() - matched) * scene.clip_length / 2.0;
    return total / static_cast<double>(scene.events.size());
}

inline double masked_accuracy(const TokenMap& generated, const TokenMap& target) {
    if (generated.ids.size() != target.ids.size()) throw ShapeError("masked_accuracy: shape mismatch");
    std::size_t same = 0;
    for (std::size_t i = 0; i < target.ids.size(); ++i) same += generated.ids[i] == target.ids[i];
    return static_cast<double>(same) / static_cast<double>(target.ids.size());
}

// ---------------------------------------------------------------------------
// Reports.

struct EvalVariant {
    std::string name;
    Guidance mode = Guidance::multi;
    SamplerConfig sampler;
};

struct ReportRow {
    std::string variant;
    int steps = 0;
    double cfg_max = 0.0;
    double fd = 0.0;
    double toy_desync = 0.0;
    double masked_accuracy = 0.0;
    double wall_time = 0.0;  // mean seconds per generated clip
};

struct EvalOutputs {
    ReportRow row;
    std::vector<TokenMap> generated;
};

/// Generates one map per held-out record (per-clip seeds shared across variants) and scores it.
inline EvalOutputs evaluate_variant(const BackboneParams& bb, const ControlNetParams* cn, const Dataset& data,
                                    const EvalVariant& variant, int clips, std::uint64_t seed) {
    const int n = std::min<int>(clips, static_cast<int>(data.records.size()));
    if (n < 2) throw DegenerateInputError("evaluation needs at least two clips");
    if (variant.mode != Guidance::backbone_uncond && !cn) {
        throw ConfigError("variant '" + variant.name + "' needs a controlnet checkpoint");
    }
    EvalOutputs out;
    out.row.variant = variant.name;
    out.row.steps = variant.sampler.steps;
    out.row.cfg_max = variant.sampler.cfg_max;
    Mat gen_emb(n, data.config.classes + 1);
    Mat ref_emb(n, data.config.classes + 1);
    double seconds = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& rec = data.records[static_cast<std::size_t>(i)];
        Rng rng(derive_seed(seed, 0xe7a1, static_cast<std::uint64_t>(i)));
        const auto t0 = std::chrono::steady_clock::now();
        std::optional<AlignedControlGrid> grid;
        if (cn) grid = align_features(*cn, fuse_semantic(rec.sync, rec.semantic), bb.config.F());
        const auto map = generate(bb, cn, ConditionEmbedding::prompt(rec.prompt), grid ? &*grid : nullptr,
                                  variant.sampler, rng, variant.mode);
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.row.toy_desync += toy_desync(map, rec.scene, data.config);
        out.row.masked_accuracy += masked_accuracy(map, rec.tokens);
        gen_emb.row(i) = embed_tokens(map, data.config).transpose();
        ref_emb.row(i) = embed_tokens(rec.tokens, data.config).transpose();
        out.generated.push_back(map);
    }
    out.row.toy_desync /= n;
    out.row.masked_accuracy /= n;
    out.row.wall_time = seconds / n;
    out.row.fd = frechet_distance(summarize(gen_emb), summarize(ref_emb));
    return out;
}

inline const std::vector<int>& sweep_steps() {
    static const std::vector<int> steps{1, 4, 6, 8, 12, 16};
    return steps;
}

struct AblationOptions {
    SamplerConfig sampler;  // base settings for every row
    bool include_backbone = true;
    bool include_controlnet = true;
    bool include_single_cfg = false;
    bool include_sweep = false;
    int clips = 200;
    std::uint64_t seed = 0;
};

inline std::vector<EvalVariant> ablation_variants(const AblationOptions& o, bool have_controlnet) {
    std::vector<EvalVariant> v;
    if (o.include_backbone) v.push_back({"backbone_uncond", Guidance::backbone_uncond, o.sampler});
    if (have_controlnet && o.include_controlnet) v.push_back({"multi_cfg", Guidance::multi, o.sampler});
    if (have_controlnet && o.include_single_cfg) {
        v.push_back({"cfg_without_video", Guidance::without_video, o.sampler});
        v.push_back({"cfg_without_text_video", Guidance::without_text_video, o.sampler});
    }
    if (have_controlnet && o.include_sweep) {
        for (int s : sweep_steps()) {
            auto cfg = o.sampler;
            cfg.steps = s;
            v.push_back({"sweep_multi_cfg", Guidance::multi, cfg});
        }
    }
    return v;
}

inline std::vector<ReportRow> ablation_report(const BackboneParams& bb, const ControlNetParams* cn, const Dataset& data,
                                              const AblationOptions& options) {
    std::vector<ReportRow> rows;
    for (const auto& v : ablation_variants(options, cn != nullptr)) {
        rows.push_back(evaluate_variant(bb, cn, data, v, options.clips, options.seed).row);
    }
    return rows;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    os << "variant,steps,cfg_max,fd,toy_desync,masked_accuracy,wall_time\n";
    for (const auto& r : rows) {
        os << r.variant << ',' << r.steps << ',' << r.cfg_max << ',' << r.fd << ',' << r.toy_desync << ','
           << r.masked_accuracy << ',' << r.wall_time << '\n';
    }
    return os.str();
}

/// FD and toy DeSync against the number of decoding steps, for external plotting.
inline std::string sweep_series_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream os;
    os.precision(10);
    os << "steps,fd,toy_desync\n";
    for (const auto& r : rows) {
        if (r.variant == "sweep_multi_cfg") os << r.steps << ',' << r.fd << ',' << r.toy_desync << '\n';
    }
    return os.str();
}

inline nlohmann::json report_json(const std::vector<ReportRow>& rows, int clips) {
    nlohmann::json j;
    j["clips"] = clips;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"variant", r.variant},
                             {"steps", r.steps},
                             {"cfg_max", r.cfg_max},
                             {"fd", r.fd},
                             {"toy_desync", r.toy_desync},
                             {"masked_accuracy", r.masked_accuracy},
                             {"wall_time", r.wall_time}});
    }
    return j;
}

}  // namespace smfoley
