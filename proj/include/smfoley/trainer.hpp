#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/checkpoint.hpp"
#include "smfoley/controlnet.hpp"
#include "smfoley/features.hpp"
#include "smfoley/gradcheck.hpp"
#include "smfoley/synthetic_data.hpp"
#include "smfoley/token_space.hpp"

namespace smfoley {

enum class Phase { pretrain_backbone, train_controlnet };

inline const char* to_string(Phase p) { return p == Phase::pretrain_backbone ? "pretrain" : "controlnet"; }

inline Phase phase_from_string(const std::string& s) {
    if (s == "pretrain") return Phase::pretrain_backbone;
    if (s == "controlnet") return Phase::train_controlnet;
    throw ConfigError("unknown phase '" + s + "' (expected pretrain or controlnet)");
}

/// How the per-example mask fraction is drawn from u ~ U[0, 1).
enum class MaskSchedule { cosine, uniform };

struct TrainConfig {
    long total_steps = 140000;
    int batch_size = 64;
    double base_lr = 1e-3;
    double warmup_fraction = 0.02;
    double condition_dropout = 0.9;
    std::uint64_t seed = 0;
    Phase phase = Phase::train_controlnet;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    long checkpoint_every = 0;  // 0: only at the end
    MaskSchedule mask_schedule = MaskSchedule::cosine;

    double peak_lr() const { return base_lr * batch_size / 256.0; }

    void validate() const {
        if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
        if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in (0, 1)");
        if (!(condition_dropout >= 0.0 && condition_dropout <= 1.0)) throw ConfigError("condition_dropout must lie in [0, 1]");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    }
};

/// Linear warmup to base_lr * batch / 256, then cosine decay to zero at total_steps.
inline double lr_at(long step, const TrainConfig& c) {
    const double peak = c.peak_lr();
    const double total = static_cast<double>(c.total_steps);
    const double warmup = c.warmup_fraction * total;
    const double s = static_cast<double>(step);
    if (s < warmup) return peak * s / warmup;
    if (total <= warmup) return peak;
    const double progress = std::min((s - warmup) / (total - warmup), 1.0);
    return peak * 0.5 * (1.0 + std::cos(kPi * progress));
}

// ---------------------------------------------------------------------------
// Decoupled-weight-decay Adam over the tensors of one parameter struct.

template <class Params>
OptimizerState make_optimizer_state(const Params& p) {
    OptimizerState o;
    for (const auto& [name, m] : named_tensors(p)) {
        o.m.push_back(Mat::Zero(m->rows(), m->cols()));
        o.v.push_back(Mat::Zero(m->rows(), m->cols()));
    }
    return o;
}

/// One AdamW update. Weight decay applies to matrices only; vectors (biases, norms) are not decayed.
template <class Params>
void adamw_update(Params& params, const Params& grads, OptimizerState& state, double lr, const TrainConfig& c) {
    auto values = named_tensors(params);
    auto gs = named_tensors(grads);
    if (values.size() != state.m.size() || gs.size() != values.size()) throw ShapeError("optimizer state layout mismatch");
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < values.size(); ++i) {
        Mat& p = *values[i].second;
        const Mat& g = *gs[i].second;
        Mat& m = state.m[i];
        Mat& v = state.v[i];
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
        const bool decay = p.rows() > 1 && p.cols() > 1;
        if (decay) p *= (1.0 - lr * c.weight_decay);
        p.array() -= lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + c.adam_eps));
    }
    ++state.step;
}

// ---------------------------------------------------------------------------

/// Dataset plus the fused control sequence of every record (the semantic mean is constant per clip).
struct TrainingSet {
    const Dataset* data = nullptr;
    std::vector<ControlFeatureSequence> fused;

    explicit TrainingSet(const Dataset& ds) : data(&ds) {
        fused.reserve(ds.records.size());
        for (const auto& r : ds.records) fused.push_back(fuse_semantic(r.sync, r.semantic));
    }

    std::size_t size() const { return data->records.size(); }
};

struct TrainState {
    Phase phase = Phase::pretrain_backbone;
    BackboneParams backbone;
    std::optional<ControlNetParams> controlnet;
    OptimizerState optimizer;

    long step() const { return static_cast<long>(optimizer.step); }

    Checkpoint checkpoint() const { return {backbone, controlnet, optimizer}; }
};

inline TrainState init_pretrain_state(const ModelConfig& model, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xb0b));
    TrainState s;
    s.phase = Phase::pretrain_backbone;
    s.backbone = init_backbone(model, rng);
    s.optimizer = make_optimizer_state(s.backbone);
    return s;
}

inline TrainState init_controlnet_state(BackboneParams backbone, int n_copy, int feature_dim, int kernel_size,
                                        std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xc0c));
    TrainState s;
    s.phase = Phase::train_controlnet;
    s.controlnet = build_controlnet(backbone, n_copy, feature_dim, rng, kernel_size);
    s.backbone = std::move(backbone);
    s.optimizer = make_optimizer_state(*s.controlnet);
    return s;
}

/// Restores a state from a checkpoint written by run_training.
inline TrainState state_from_checkpoint(Checkpoint ck, Phase phase) {
    TrainState s;
    s.phase = phase;
    s.backbone = std::move(ck.backbone);
    s.controlnet = std::move(ck.controlnet);
    if (phase == Phase::train_controlnet && !s.controlnet) throw ConfigError("resume checkpoint has no controlnet section");
    if (ck.optimizer) {
        s.optimizer = std::move(*ck.optimizer);
    } else {
        s.optimizer = phase == Phase::pretrain_backbone ? make_optimizer_state(s.backbone) : make_optimizer_state(*s.controlnet);
    }
    return s;
}

inline double draw_mask_fraction(Rng& rng, MaskSchedule schedule) {
    const double u = rng.uniform();
    return schedule == MaskSchedule::cosine ? mask_fraction(u) : 1.0 - u;
}

/// Masks a target map for training; at least one position is always hidden.
inline MaskedTokenMap training_mask(const TokenMap& target, Rng& rng, MaskSchedule schedule) {
    auto masked = apply_random_mask(target, draw_mask_fraction(rng, schedule), rng);
    if (masked.masked_count() == 0) {
        const auto pos = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(target.size())));
        masked.mask[pos] = 1;
        masked.tokens.ids[pos] = target.mask_id();
    }
    return masked;
}

struct StepResult {
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
    bool cond_dropped = false;
};

/// Record indices for a step: position step*B + i of an endless stream of per-epoch shuffles.
class BatchSchedule {
public:
    BatchSchedule(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

    std::vector<std::size_t> indices(long step, int batch_size) {
        std::vector<std::size_t> out;
        for (int i = 0; i < batch_size; ++i) {
            const auto pos = static_cast<std::uint64_t>(step) * batch_size + i;
            const auto epoch = pos / n_;
            if (epoch != cached_epoch_) shuffle(epoch);
            out.push_back(perm_[pos % n_]);
        }
        return out;
    }

private:
    void shuffle(std::uint64_t epoch) {
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        Rng rng(derive_seed(seed_, 0xe90c, epoch));
        for (std::size_t i = n_; i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
        cached_epoch_ = epoch;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t cached_epoch_ = ~0ULL;
    std::vector<std::size_t> perm_;
};

/// One optimizer update on the given records. The whole batch shares one condition-dropout draw.
/// A non-finite loss or gradient raises NumericError and leaves the state untouched.
inline StepResult train_step(TrainState& state, const TrainingSet& set, const std::vector<std::size_t>& indices,
                             const TrainConfig& config, Rng& rng) {
    StepResult res;
    res.step = state.step();
    res.lr = lr_at(res.step, config);
    res.cond_dropped = rng.bernoulli(config.condition_dropout);
    const auto uncond = state.backbone.unconditional();

    auto cond_for = [&](const DatasetRecord& rec) {
        return res.cond_dropped ? uncond : ConditionEmbedding::prompt(rec.prompt);
    };
    auto fail = [&](const char* what) {
        throw NumericError(std::string(what) + " at step " + std::to_string(res.step));
    };
    auto guarded = [&](auto&& f) {
        try {
            return f();
        } catch (const NumericError& e) {
            fail(e.what());
            throw;
        }
    };

    if (state.phase == Phase::pretrain_backbone) {
        std::vector<MlmExample> batch;
        for (auto i : indices) {
            const auto& rec = set.data->records[i];
            batch.push_back({training_mask(rec.tokens, rng, config.mask_schedule), rec.tokens, cond_for(rec)});
        }
        auto g = guarded([&] { return grad(state.backbone, batch); });
        res.loss = g.loss;
        bool finite = std::isfinite(g.loss);
        g.grads.visit([&](const std::string&, const Mat& m) { finite = finite && m.allFinite(); });
        if (!finite) fail("non-finite loss or gradient");
        adamw_update(state.backbone, g.grads, state.optimizer, res.lr, config);
    } else {
        if (!state.controlnet) throw StateError("controlnet phase without a controlnet");
        std::vector<ControlExample> batch;
        for (auto i : indices) {
            const auto& rec = set.data->records[i];
            batch.push_back({training_mask(rec.tokens, rng, config.mask_schedule), rec.tokens, cond_for(rec), set.fused[i]});
        }
        auto g = guarded([&] { return grad_controlled(state.backbone, *state.controlnet, batch, false); });
        res.loss = g.loss;
        bool finite = std::isfinite(g.loss);
        g.grads.visit([&](const std::string&, const Mat& m) { finite = finite && m.allFinite(); });
        if (!finite) fail("non-finite loss or gradient");
        adamw_update(*state.controlnet, g.grads, state.optimizer, res.lr, config);
    }
    return res;
}

inline std::string loss_csv_header() { return "step,lr,loss,cond_dropped\n"; }

inline std::string loss_csv_row(const StepResult& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.step << ',' << r.lr << ',' << r.loss << ',' << (r.cond_dropped ? 1 : 0) << '\n';
    return os.str();
}

struct RunOptions {
    long stop_at = -1;                              // stop before this step (simulated interruption)
    std::function<void(const StepResult&)> on_step;  // e.g. append to the loss log
    std::function<void(const TrainState&)> on_checkpoint;
};

/// Runs steps state.step() .. total_steps-1. Each step uses its own derived generator, so a run
/// resumed from a checkpoint continues exactly like an uninterrupted one.
inline std::vector<StepResult> run_training(const TrainingSet& set, const TrainConfig& config, TrainState& state,
                                            const RunOptions& options = {}) {
    config.validate();
    if (set.size() == 0 && config.total_steps > state.step()) throw ArgumentError("run_training: empty dataset");
    if (state.phase != config.phase) throw ConfigError("training state phase does not match the config phase");
    BatchSchedule schedule(std::max<std::size_t>(set.size(), 1), derive_seed(config.seed, 0xba7c));
    std::vector<StepResult> log;
    const long end = options.stop_at >= 0 ? std::min(options.stop_at, config.total_steps) : config.total_steps;
    for (long step = state.step(); step < end; ++step) {
        Rng rng(derive_seed(config.seed, 0x57e9, static_cast<std::uint64_t>(step)));
        const auto r = train_step(state, set, schedule.indices(step, config.batch_size), config, rng);
        log.push_back(r);
        if (options.on_step) options.on_step(r);
        if (options.on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            options.on_checkpoint(state);
        }
    }
    return log;
}

}  // namespace smfoley
