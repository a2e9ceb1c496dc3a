#pragma once

#include <charconv>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/binary_io.hpp"
#include "smfoley/sampler.hpp"
#include "smfoley/synthetic_data.hpp"
#include "smfoley/trainer.hpp"

// Plain-text run configuration:
//
//   [section]
//   key = value   # comment
//
// Sections: model, data, pretrain, controlnet, sampler, run. Unknown sections or keys are
// rejected. Defaults follow the published setup where it gives a value.

namespace smfoley {

struct RunConfig {
    ModelConfig model{};
    int n_copy = 12;
    int conv_kernel = 3;
    DatasetConfig data{};
    TrainConfig pretrain = [] {
        TrainConfig t;
        t.phase = Phase::pretrain_backbone;
        t.condition_dropout = 0.1;
        return t;
    }();
    TrainConfig controlnet = [] {
        TrainConfig t;
        t.phase = Phase::train_controlnet;
        return t;
    }();
    SamplerConfig sampler{};
    std::uint64_t seed = 0;

    /// Copies shared values (vocab, geometry, condition dim) across sections and validates.
    void resolve() {
        data.vocab = model.vocab;
        data.geometry = model.geometry;
        model.condition_dim = data.feature_dim;
        if (data.block_size == 0) data.block_size = (model.vocab - 1) / std::max(data.classes, 1);
        if (data.seed == 0) data.seed = seed;
        if (pretrain.seed == 0) pretrain.seed = derive_seed(seed, 0x9e7);
        if (controlnet.seed == 0) controlnet.seed = derive_seed(seed, 0xc7e);
        pretrain.phase = Phase::pretrain_backbone;
        controlnet.phase = Phase::train_controlnet;
        model.validate();
        data.validate();
        pretrain.validate();
        controlnet.validate();
        sampler.validate();
        if (n_copy < 1 || n_copy > model.depth) throw ConfigError("model.n_copy must lie in [1, model.depth]");
        if (conv_kernel < 1 || conv_kernel % 2 == 0) throw ConfigError("model.conv_kernel must be odd");
    }

    const TrainConfig& train(Phase p) const { return p == Phase::pretrain_backbone ? pretrain : controlnet; }
};

struct ConfigField {
    std::string section;
    std::string key;
    std::string note;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

namespace detail {

template <class T>
T parse_number(const std::string& s, const std::string& key) {
    T v{};
    const auto* b = s.data();
    const auto* e = s.data() + s.size();
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e) throw ConfigError("bad value '" + s + "' for key " + key);
    return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("bad boolean '" + s + "' for key " + key);
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
ConfigField int_field(std::string sec, std::string key, T& ref, std::string note) {
    const std::string full = sec + "." + key;
    return {std::move(sec), std::move(key), std::move(note), [&ref] { return std::to_string(ref); },
            [&ref, full](const std::string& s) { ref = parse_number<T>(s, full); }};
}

inline ConfigField double_field(std::string sec, std::string key, double& ref, std::string note) {
    const std::string full = sec + "." + key;
    return {std::move(sec), std::move(key), std::move(note), [&ref] { return fmt_double(ref); },
            [&ref, full](const std::string& s) { ref = parse_number<double>(s, full); }};
}

inline ConfigField bool_field(std::string sec, std::string key, bool& ref, std::string note) {
    const std::string full = sec + "." + key;
    return {std::move(sec), std::move(key), std::move(note), [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, full](const std::string& s) { ref = parse_bool(s, full); }};
}

inline void train_fields(std::vector<ConfigField>& out, const std::string& sec, TrainConfig& t) {
    out.push_back(int_field(sec, "total_steps", t.total_steps, "140K ControlNet steps in the published recipe"));
    out.push_back(int_field(sec, "batch_size", t.batch_size, "published batch size 64"));
    out.push_back(double_field(sec, "base_lr", t.base_lr, "published base LR 1e-3; peak LR = base * batch / 256"));
    out.push_back(double_field(sec, "warmup_fraction", t.warmup_fraction, "2.8K of 140K steps of linear warmup"));
    out.push_back(double_field(sec, "condition_dropout", t.condition_dropout,
                               "prompt replaced by the unconditional mask (0.9 for ControlNet training)"));
    out.push_back(int_field(sec, "seed", t.seed, "0 = derive from run.seed"));
    out.push_back(double_field(sec, "weight_decay", t.weight_decay, "AdamW decay (not given in the publication)"));
    out.push_back(double_field(sec, "beta1", t.beta1, "AdamW beta1 (not given in the publication)"));
    out.push_back(double_field(sec, "beta2", t.beta2, "AdamW beta2 (not given in the publication)"));
    out.push_back(int_field(sec, "checkpoint_every", t.checkpoint_every, "0 = checkpoint only at the end"));
    out.push_back({sec, "mask_schedule", "train-time mask fraction: cosine (cos(u*pi/2)) or uniform",
                   [&t] { return std::string(t.mask_schedule == MaskSchedule::cosine ? "cosine" : "uniform"); },
                   [&t, sec](const std::string& s) {
                       if (s == "cosine") t.mask_schedule = MaskSchedule::cosine;
                       else if (s == "uniform") t.mask_schedule = MaskSchedule::uniform;
                       else throw ConfigError("bad value '" + s + "' for key " + sec + ".mask_schedule");
                   }});
}

}  // namespace detail

inline std::vector<ConfigField> config_fields(RunConfig& c) {
    using namespace detail;
    std::vector<ConfigField> f;
    f.push_back(int_field("model", "depth", c.model.depth, "24 transformer blocks"));
    f.push_back(int_field("model", "dim", c.model.dim, "attention dimension D = 768"));
    f.push_back(int_field("model", "heads", c.model.heads, "not given in the publication"));
    f.push_back(int_field("model", "ff_dim", c.model.ff_dim, "not given in the publication (4 * D)"));
    f.push_back(int_field("model", "vocab", c.model.vocab, "10-bit codebook"));
    f.push_back(int_field("model", "mel_bins", c.model.geometry.mel_bins, "80 Mel bins"));
    f.push_back(int_field("model", "frames", c.model.geometry.frames, "848 spectrogram frames"));
    f.push_back(int_field("model", "patch", c.model.geometry.patch, "16 x 16 tokenizer patches -> 5 x 53 grid"));
    f.push_back(int_field("model", "n_copy", c.n_copy, "first 12 blocks copied into the ControlNet"));
    f.push_back(int_field("model", "conv_kernel", c.conv_kernel, "aligner conv kernel (not given in the publication)"));
    f.push_back(int_field("data", "classes", c.data.classes, "synthetic event classes"));
    f.push_back(int_field("data", "sync_frames", c.data.sync_frames, "240 sync feature frames per 10 s clip"));
    f.push_back(int_field("data", "semantic_frames", c.data.semantic_frames, "80 semantic feature frames per 10 s clip"));
    f.push_back(int_field("data", "feature_dim", c.data.feature_dim, "synthetic feature / prompt dimension"));
    f.push_back(double_field("data", "noise", c.data.noise, "Gaussian feature noise sigma"));
    f.push_back(int_field("data", "background_token", c.data.background_token, "token id for silence"));
    f.push_back(int_field("data", "block_size", c.data.block_size, "token ids per class; 0 = (vocab - 1) / classes"));
    f.push_back(int_field("data", "pattern_period", c.data.pattern_period, "time period of in-block token pattern"));
    f.push_back(double_field("data", "clip_length", c.data.clip_length, "10-second clips"));
    f.push_back(int_field("data", "max_events", c.data.max_events, "events per clip, at most"));
    f.push_back(double_field("data", "min_duration", c.data.min_duration, "shortest event, seconds"));
    f.push_back(double_field("data", "max_duration", c.data.max_duration, "longest event, seconds"));
    f.push_back(int_field("data", "seed", c.data.seed, "0 = use run.seed"));
    f.push_back(bool_field("data", "orthogonal_table", c.data.orthogonal_table, "orthonormal class embeddings"));
    train_fields(f, "pretrain", c.pretrain);
    train_fields(f, "controlnet", c.controlnet);
    f.push_back(int_field("sampler", "steps", c.sampler.steps, "12 decoding steps"));
    f.push_back(double_field("sampler", "cfg_max", c.sampler.cfg_max, "CFG scale rises linearly from 0 to 3"));
    f.push_back(double_field("sampler", "gumbel_temp", c.sampler.gumbel_temp, "Gumbel temperature 9.0"));
    f.push_back(bool_field("sampler", "greedy_final", c.sampler.greedy_final, "argmax instead of sampling at the last step"));
    f.push_back(int_field("run", "seed", c.seed, "master seed"));
    return f;
}

/// Applies `text` on top of the defaults. Does not call resolve().
inline RunConfig parse_config(const std::string& text) {
    RunConfig c;
    auto fields = config_fields(c);
    std::istringstream is(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            const bool known = std::any_of(fields.begin(), fields.end(), [&](const auto& f) { return f.section == section; });
            if (!known) throw ConfigError("unknown config section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const auto key = detail::trim(line.substr(0, eq));
        const auto value = detail::trim(line.substr(eq + 1));
        auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.section == section && f.key == key; });
        if (it == fields.end()) throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
        it->set(value);
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError&) {
        throw IoError("cannot read config file " + path);
    }
    auto c = parse_config(text);
    c.resolve();
    return c;
}

/// Canonical INI rendering of every key, with its note as a trailing comment.
inline std::string dump_config(RunConfig& c, bool with_notes = true) {
    std::ostringstream os;
    std::string section;
    for (const auto& f : config_fields(c)) {
        if (f.section != section) {
            if (!section.empty()) os << '\n';
            section = f.section;
            os << '[' << section << "]\n";
        }
        os << f.key << " = " << f.get();
        if (with_notes) os << "  # " << f.note;
        os << '\n';
    }
    return os.str();
}

inline std::uint64_t config_hash(const RunConfig& c) {
    RunConfig copy = c;
    const auto text = dump_config(copy, false);
    return fnv1a(text.data(), text.size());
}

}  // namespace smfoley
