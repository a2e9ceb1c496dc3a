#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/controlnet.hpp"
#include "smfoley/token_space.hpp"

namespace smfoley {

struct SamplerConfig {
    int steps = 12;
    double cfg_max = 3.0;
    double gumbel_temp = 9.0;
    bool greedy_final = false;

    void validate() const {
        if (steps < 1) throw ConfigError("sampler steps must be >= 1");
        if (!(cfg_max >= 0.0)) throw ConfigError("cfg_max must be >= 0");
        if (!(gumbel_temp >= 0.0)) throw ConfigError("gumbel_temp must be >= 0");
    }
};

/// Which logit combination drives sampling.
enum class Guidance {
    multi,               // uncond + t[(text&video - uncond) + (video - uncond)]
    without_video,       // uncond + t(text&video - uncond)
    without_text_video,  // uncond + t(video - uncond)
    backbone_uncond,     // unconditional backbone only, no control
};

inline const char* to_string(Guidance g) {
    switch (g) {
        case Guidance::multi: return "multi_cfg";
        case Guidance::without_video: return "cfg_without_video";
        case Guidance::without_text_video: return "cfg_without_text_video";
        case Guidance::backbone_uncond: return "backbone_uncond";
    }
    return "?";
}

inline Guidance guidance_from_string(const std::string& s) {
    for (auto g : {Guidance::multi, Guidance::without_video, Guidance::without_text_video, Guidance::backbone_uncond}) {
        if (s == to_string(g)) return g;
    }
    throw ConfigError("unknown guidance mode '" + s + "'");
}

inline void check_same_shape(const LogitsGrid& a, const LogitsGrid& b) {
    if (a.F != b.F || a.T != b.T || a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols()) {
        throw ShapeError("logit grids differ in shape");
    }
}

/// Two-condition classifier-free guidance on logits.
inline LogitsGrid cfg_combine(const LogitsGrid& l_uncond, const LogitsGrid& l_video, const LogitsGrid& l_tv, double t) {
    check_same_shape(l_uncond, l_video);
    check_same_shape(l_uncond, l_tv);
    LogitsGrid out = l_uncond;
    out.data = l_uncond.data.array() + t * ((l_tv.data.array() - l_uncond.data.array()) +
                                            (l_video.data.array() - l_uncond.data.array()));
    return out;
}

/// Single-condition guidance, uncond + t(cond - uncond).
inline LogitsGrid cfg_single(const LogitsGrid& l_uncond, const LogitsGrid& l_cond, double t) {
    check_same_shape(l_uncond, l_cond);
    LogitsGrid out = l_uncond;
    out.data = l_uncond.data.array() + t * (l_cond.data.array() - l_uncond.data.array());
    return out;
}

/// Guidance scale at step k, rising linearly from 0 to cfg_max over the run.
inline double cfg_scale_at(int k, const SamplerConfig& config) {
    if (k < 0 || k >= config.steps) throw ArgumentError("cfg_scale_at: step out of range");
    if (config.steps == 1) return 0.0;
    return config.cfg_max * k / (config.steps - 1);
}

/// Gumbel temperature at step k, annealed linearly to 0 at the final step.
inline double gumbel_temp_at(int k, const SamplerConfig& config) {
    return config.gumbel_temp * (config.steps - 1 - k) / std::max(config.steps - 1, 1);
}

struct SamplerState {
    MaskedTokenMap current;
    int step = 0;
    Rng rng;
};

struct StepTrace {
    int step;
    int masked_before;
    int revealed;
    int masked_after;
    double cfg_scale;
    double temperature;
};

inline std::string trace_csv(const std::vector<StepTrace>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "step,masked_before,revealed,masked_after,cfg_scale,gumbel_temp\n";
    for (const auto& r : trace) {
        os << r.step << ',' << r.masked_before << ',' << r.revealed << ',' << r.masked_after << ',' << r.cfg_scale << ','
           << r.temperature << '\n';
    }
    return os.str();
}

/// One decoding step: draw a candidate per masked position, score it by log-probability plus
/// annealed Gumbel noise, and commit the most confident ones according to the cosine plan.
inline StepTrace sample_step(SamplerState& state, const LogitsGrid& l_foley, const SamplerConfig& config) {
    config.validate();
    auto& cur = state.current;
    const int n = cur.tokens.size();
    const int masked = cur.masked_count();
    if (masked == 0) throw StateError("sample_step: no masked positions left");
    if (state.step < 0 || state.step >= config.steps) throw StateError("sample_step: step index past the schedule");
    if (l_foley.data.rows() != n || l_foley.vocab() != cur.tokens.vocab) throw ShapeError("sample_step: logits shape");

    const int k = state.step;
    const int target_remaining = masked_remaining(n, config.steps)[k];
    const int reveal = std::clamp(masked - target_remaining, 0, masked);
    const double temp = gumbel_temp_at(k, config);
    const bool greedy = config.greedy_final && k == config.steps - 1;

    struct Candidate {
        int pos;
        std::int32_t token;
        double confidence;
    };
    std::vector<Candidate> cands;
    cands.reserve(static_cast<std::size_t>(masked));
    for (int pos = 0; pos < n; ++pos) {
        if (!cur.mask[pos]) continue;
        const auto row = l_foley.data.row(pos);
        const double lse = log_sum_exp(row);
        Eigen::Index token = 0;
        if (greedy) {
            row.maxCoeff(&token);
        } else {
            const double u = state.rng.uniform();
            double cum = 0.0;
            token = row.size() - 1;
            for (Eigen::Index v = 0; v < row.size(); ++v) {
                cum += std::exp(row(v) - lse);
                if (u < cum) {
                    token = v;
                    break;
                }
            }
        }
        const double g = state.rng.gumbel();
        cands.push_back({pos, static_cast<std::int32_t>(token), (row(token) - lse) + temp * g});
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
    for (int i = 0; i < reveal; ++i) {
        cur.tokens.ids[cands[i].pos] = cands[i].token;
        cur.mask[cands[i].pos] = 0;
    }
    ++state.step;
    return {k, masked, reveal, masked - reveal, 0.0, temp};
}

/// Iterative decoding with three forward passes per step (fewer for the single-condition
/// and backbone-only variants).
inline TokenMap generate(const BackboneParams& bb, const ControlNetParams* cn, const ConditionEmbedding& prompt,
                         const AlignedControlGrid* control, const SamplerConfig& config, Rng& rng,
                         Guidance mode = Guidance::multi, std::vector<StepTrace>* trace = nullptr) {
    config.validate();
    const auto& c = bb.config;
    if (mode != Guidance::backbone_uncond && (!cn || !control)) {
        throw ConfigError("guided sampling needs a controlnet and a control grid");
    }
    SamplerState state{MaskedTokenMap::fully_masked(c.F(), c.T(), c.vocab), 0, Rng(rng.next_u64())};
    const auto uncond = bb.unconditional();
    for (int k = 0; k < config.steps && state.current.masked_count() > 0; ++k) {
        const double t = cfg_scale_at(k, config);
        const LogitsGrid l_uncond = forward(bb, state.current, uncond);
        LogitsGrid l_foley;
        switch (mode) {
            case Guidance::backbone_uncond:
                l_foley = l_uncond;
                break;
            case Guidance::multi: {
                const auto l_video = forward_controlled(bb, *cn, state.current, uncond, *control);
                const auto l_tv = forward_controlled(bb, *cn, state.current, prompt, *control);
                l_foley = cfg_combine(l_uncond, l_video, l_tv, t);
                break;
            }
            case Guidance::without_video:
                l_foley = cfg_single(l_uncond, forward_controlled(bb, *cn, state.current, prompt, *control), t);
                break;
            case Guidance::without_text_video:
                l_foley = cfg_single(l_uncond, forward_controlled(bb, *cn, state.current, uncond, *control), t);
                break;
        }
        auto row = sample_step(state, l_foley, config);
        row.cfg_scale = t;
        if (trace) trace->push_back(row);
    }
    return state.current.tokens;
}

}  // namespace smfoley
