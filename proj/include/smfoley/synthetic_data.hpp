#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/binary_io.hpp"
#include "smfoley/features.hpp"
#include "smfoley/token_space.hpp"

namespace smfoley {

struct SceneEvent {
    double onset = 0.0;
    double duration = 0.0;
    int cls = 0;

    double end() const { return onset + duration; }
    bool operator==(const SceneEvent&) const = default;
};

struct SyntheticScene {
    std::vector<SceneEvent> events;  // sorted by onset
    double clip_length = 10.0;

    bool operator==(const SyntheticScene&) const = default;
};

struct DatasetConfig {
    int classes = 4;
    int sync_frames = 240;     // 24 Hz over a 10 s clip
    int semantic_frames = 80;  // 8 Hz over a 10 s clip
    int feature_dim = 8;
    double noise = 0.1;
    int background_token = 0;
    int block_size = 15;      // vocabulary ids per class
    int pattern_period = 3;   // time period of the in-block token pattern
    double clip_length = 10.0;
    int max_events = 3;
    double min_duration = 0.5;
    double max_duration = 2.5;
    std::uint64_t seed = 0;
    int vocab = 64;
    PatchGeometry geometry{};
    bool orthogonal_table = true;

    int F() const { return geometry.F(); }
    int T() const { return geometry.T(); }
    double sync_rate() const { return sync_frames / clip_length; }
    double semantic_rate() const { return semantic_frames / clip_length; }
    int block_begin(int cls) const { return 1 + cls * block_size; }

    void validate() const {
        try {
            geometry.validate();
        } catch (const GeometryError& e) {
            throw ConfigError(e.what());
        }
        if (classes < 1) throw ConfigError("dataset needs at least one class");
        if (sync_frames < 1 || semantic_frames < 1 || feature_dim < 1) throw ConfigError("frame counts and feature dim must be >= 1");
        if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
        if (!(clip_length > 0.0)) throw ConfigError("clip length must be > 0");
        if (max_events < 1) throw ConfigError("max_events must be >= 1");
        if (!(min_duration > 0.0 && min_duration <= max_duration && max_duration <= clip_length)) {
            throw ConfigError("event durations must satisfy 0 < min <= max <= clip length");
        }
        if (pattern_period < 1 || block_size < F() * pattern_period) {
            throw ConfigError("block_size must hold F * pattern_period distinct tokens");
        }
        if (1 + classes * block_size > vocab) {
            throw ConfigError("class token blocks do not fit in the vocabulary: need " +
                              std::to_string(1 + classes * block_size) + " ids, have " + std::to_string(vocab));
        }
        if (background_token < 0 || background_token >= vocab ||
            (background_token >= 1 && background_token < 1 + classes * block_size)) {
            throw ConfigError("background token must lie outside every class block");
        }
        if (orthogonal_table && feature_dim < classes) {
            throw ConfigError("orthogonal class embeddings need feature_dim >= classes");
        }
    }
};

/// Class id encoded by a token, or -1 for background and ids outside every block.
inline int class_of_token(std::int32_t id, const DatasetConfig& c) {
    if (id < 1 || id >= 1 + c.classes * c.block_size) return -1;
    return (id - 1) / c.block_size;
}

struct ColumnSpan {
    int begin;
    int end;  // exclusive
};

/// Columns covered by an event: [floor(onset*T/clip), ceil(end*T/clip)).
inline ColumnSpan event_columns(const SceneEvent& e, int T, double clip) {
    const int b = static_cast<int>(std::floor(e.onset * T / clip));
    const int en = static_cast<int>(std::ceil(e.end() * T / clip));
    return {std::clamp(b, 0, T), std::clamp(en, 0, T)};
}

/// Samples up to max_events events whose column supports are separated by at least one
/// background column, so that every event stays individually detectable.
inline SyntheticScene gen_scene(Rng& rng, const DatasetConfig& config) {
    config.validate();
    constexpr int kSceneRetries = 64;
    constexpr int kEventRetries = 64;
    const int T = config.T();
    for (int attempt = 0; attempt < kSceneRetries; ++attempt) {
        SyntheticScene scene;
        scene.clip_length = config.clip_length;
        const int n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_events)));
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            ok = false;
            for (int r = 0; r < kEventRetries; ++r) {
                SceneEvent e;
                e.cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.classes)));
                e.duration = config.min_duration + rng.uniform() * (config.max_duration - config.min_duration);
                e.onset = rng.uniform() * (config.clip_length - e.duration);
                const auto span = event_columns(e, T, config.clip_length);
                const bool clear = std::all_of(scene.events.begin(), scene.events.end(), [&](const SceneEvent& o) {
                    const auto os = event_columns(o, T, config.clip_length);
                    return span.end + 1 <= os.begin || os.end + 1 <= span.begin;
                });
                if (clear) {
                    scene.events.push_back(e);
                    ok = true;
                    break;
                }
            }
        }
        if (!ok) continue;
        std::sort(scene.events.begin(), scene.events.end(),
                  [](const SceneEvent& a, const SceneEvent& b) { return a.onset < b.onset; });
        return scene;
    }
    throw GenerationError("gen_scene: could not pack events without overlap");
}

/// K x d class embedding table; orthonormal rows when requested.
inline Mat class_embedding_table(const DatasetConfig& config) {
    Mat table = Mat::Zero(config.classes, config.feature_dim);
    if (config.orthogonal_table) {
        if (config.feature_dim < config.classes) throw ConfigError("orthogonal class embeddings need feature_dim >= classes");
        for (int c = 0; c < config.classes; ++c) table(c, c) = 1.0;
    } else {
        Rng rng(derive_seed(config.seed, 0x7ab1e));
        for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = rng.normal();
        for (int c = 0; c < config.classes; ++c) table.row(c).normalize();
    }
    return table;
}

struct RenderedFeatures {
    ControlFeatureSequence sync;
    ControlFeatureSequence semantic;
    ConditionEmbedding prompt;
};

inline void round_to_float(Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

/// Sync features carry class bumps on the frames each event overlaps; semantic features hold the
/// embedding of the active (or most recent) event; the prompt is the mean event embedding.
/// Values are rounded to 32-bit floats, the precision they are stored at.
inline RenderedFeatures render_features(const SyntheticScene& scene, const DatasetConfig& config, Rng& rng) {
    config.validate();
    const Mat table = class_embedding_table(config);
    RenderedFeatures out;

    out.sync.frame_rate = config.sync_rate();
    out.sync.data = Mat::Zero(config.sync_frames, config.feature_dim);
    for (const auto& e : scene.events) {
        const int b = std::max(0, static_cast<int>(std::floor(e.onset * out.sync.frame_rate)));
        const int en = std::min(config.sync_frames, static_cast<int>(std::ceil(e.end() * out.sync.frame_rate)));
        for (int i = b; i < en; ++i) out.sync.data.row(i) = table.row(e.cls);
    }

    out.semantic.frame_rate = config.semantic_rate();
    out.semantic.data = Mat::Zero(config.semantic_frames, config.feature_dim);
    for (int i = 0; i < config.semantic_frames; ++i) {
        const double time = (i + 0.5) / out.semantic.frame_rate;
        const SceneEvent* latest = nullptr;
        for (const auto& e : scene.events) {
            if (e.onset <= time) latest = &e;
        }
        if (latest) out.semantic.data.row(i) = table.row(latest->cls);
    }

    if (config.noise > 0.0) {
        for (Eigen::Index i = 0; i < out.sync.data.size(); ++i) out.sync.data.data()[i] += config.noise * rng.normal();
        for (Eigen::Index i = 0; i < out.semantic.data.size(); ++i) out.semantic.data.data()[i] += config.noise * rng.normal();
    }
    round_to_float(out.sync.data);
    round_to_float(out.semantic.data);

    Mat prompt = Mat::Zero(1, config.feature_dim);
    for (const auto& e : scene.events) prompt += table.row(e.cls);
    if (!scene.events.empty()) prompt /= static_cast<double>(scene.events.size());
    round_to_float(prompt);
    out.prompt = ConditionEmbedding::prompt(std::move(prompt));
    return out;
}

/// Token id for class `cls` at grid cell (f, t).
inline std::int32_t event_token(int cls, int f, int t, const DatasetConfig& c) {
    return c.block_begin(cls) + f * c.pattern_period + (t % c.pattern_period);
}

/// Background everywhere; event columns carry the event class's block pattern. Later events win on overlap.
inline TokenMap render_tokens(const SyntheticScene& scene, const DatasetConfig& config) {
    config.validate();
    TokenMap map(config.F(), config.T(), config.vocab, config.background_token);
    for (const auto& e : scene.events) {
        const auto span = event_columns(e, config.T(), scene.clip_length);
        for (int t = span.begin; t < span.end; ++t) {
            for (int f = 0; f < config.F(); ++f) map.at(f, t) = event_token(e.cls, f, t, config);
        }
    }
    return map;
}

// ---------------------------------------------------------------------------
// Dataset records and file format.

struct DatasetRecord {
    SyntheticScene scene;
    ControlFeatureSequence sync;
    ControlFeatureSequence semantic;
    Mat prompt;  // 1 x d
    TokenMap tokens;

    bool operator==(const DatasetRecord& o) const {
        return scene == o.scene && sync == o.sync && semantic == o.semantic && prompt.rows() == o.prompt.rows() &&
               prompt.cols() == o.prompt.cols() && prompt == o.prompt && tokens == o.tokens;
    }
};

struct Dataset {
    DatasetConfig config;
    std::vector<DatasetRecord> records;
};

inline DatasetRecord make_record(const DatasetConfig& config, std::uint64_t index) {
    Rng rng(derive_seed(config.seed, 0xda7a, index));
    DatasetRecord r;
    r.scene = gen_scene(rng, config);
    auto feats = render_features(r.scene, config, rng);
    r.sync = std::move(feats.sync);
    r.semantic = std::move(feats.semantic);
    r.prompt = std::move(feats.prompt.vector);
    r.tokens = render_tokens(r.scene, config);
    return r;
}

/// Records are derived from per-index seeds, so any record can be regenerated on its own.
inline Dataset make_dataset(const DatasetConfig& config, int count) {
    config.validate();
    if (count < 0) throw ArgumentError("record count must be >= 0");
    Dataset ds{config, {}};
    ds.records.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) ds.records.push_back(make_record(config, static_cast<std::uint64_t>(i)));
    return ds;
}

inline constexpr char kDatasetMagic[4] = {'S', 'M', 'F', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset_config(BinaryWriter& w, const DatasetConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.classes));
    w.u32(static_cast<std::uint32_t>(c.sync_frames));
    w.u32(static_cast<std::uint32_t>(c.semantic_frames));
    w.u32(static_cast<std::uint32_t>(c.feature_dim));
    w.f64(c.noise);
    w.i32(c.background_token);
    w.u32(static_cast<std::uint32_t>(c.block_size));
    w.u32(static_cast<std::uint32_t>(c.pattern_period));
    w.f64(c.clip_length);
    w.u32(static_cast<std::uint32_t>(c.max_events));
    w.f64(c.min_duration);
    w.f64(c.max_duration);
    w.u64(c.seed);
    w.u32(static_cast<std::uint32_t>(c.vocab));
    w.u32(static_cast<std::uint32_t>(c.geometry.mel_bins));
    w.u32(static_cast<std::uint32_t>(c.geometry.frames));
    w.u32(static_cast<std::uint32_t>(c.geometry.patch));
    w.u8(c.orthogonal_table ? 1 : 0);
}

inline DatasetConfig read_dataset_config(BinaryReader& r) {
    DatasetConfig c;
    c.classes = static_cast<int>(r.u32());
    c.sync_frames = static_cast<int>(r.u32());
    c.semantic_frames = static_cast<int>(r.u32());
    c.feature_dim = static_cast<int>(r.u32());
    c.noise = r.f64();
    c.background_token = r.i32();
    c.block_size = static_cast<int>(r.u32());
    c.pattern_period = static_cast<int>(r.u32());
    c.clip_length = r.f64();
    c.max_events = static_cast<int>(r.u32());
    c.min_duration = r.f64();
    c.max_duration = r.f64();
    c.seed = r.u64();
    c.vocab = static_cast<int>(r.u32());
    c.geometry.mel_bins = static_cast<int>(r.u32());
    c.geometry.frames = static_cast<int>(r.u32());
    c.geometry.patch = static_cast<int>(r.u32());
    c.orthogonal_table = r.u8() != 0;
    return c;
}

namespace detail {

inline void write_sequence(BinaryWriter& w, const ControlFeatureSequence& s) {
    w.u32(static_cast<std::uint32_t>(s.length()));
    w.u32(static_cast<std::uint32_t>(s.dim()));
    w.f64(s.frame_rate);
    for (Eigen::Index i = 0; i < s.data.size(); ++i) w.f32(static_cast<float>(s.data.data()[i]));
}

inline ControlFeatureSequence read_sequence(BinaryReader& r) {
    ControlFeatureSequence s;
    const auto t = r.u32();
    const auto d = r.u32();
    s.frame_rate = r.f64();
    if (static_cast<std::size_t>(t) * d * 4 > r.remaining()) throw FormatError("feature block runs past end of file");
    s.data.resize(t, d);
    for (Eigen::Index i = 0; i < s.data.size(); ++i) s.data.data()[i] = r.f32();
    return s;
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& ds) {
    BinaryWriter w;
    w.bytes(std::string_view(kDatasetMagic, 4));
    w.u32(kDatasetVersion);
    w.u32(kEndianTag);
    write_dataset_config(w, ds.config);
    w.u64(ds.records.size());
    for (const auto& rec : ds.records) {
        w.u32(static_cast<std::uint32_t>(rec.scene.events.size()));
        w.f64(rec.scene.clip_length);
        for (const auto& e : rec.scene.events) {
            w.f64(e.onset);
            w.f64(e.duration);
            w.u32(static_cast<std::uint32_t>(e.cls));
        }
        detail::write_sequence(w, rec.sync);
        detail::write_sequence(w, rec.semantic);
        w.u32(static_cast<std::uint32_t>(rec.prompt.cols()));
        for (Eigen::Index i = 0; i < rec.prompt.size(); ++i) w.f32(static_cast<float>(rec.prompt.data()[i]));
        w.u32(static_cast<std::uint32_t>(rec.tokens.F));
        w.u32(static_cast<std::uint32_t>(rec.tokens.T));
        for (auto id : rec.tokens.ids) w.u16(static_cast<std::uint16_t>(id));
    }
    return w.data();
}

/// Parses and validates a dataset file image; any inconsistency is a FormatError.
inline Dataset decode_dataset(std::string_view bytes) {
    BinaryReader r(bytes);
    if (r.bytes(4) != std::string_view(kDatasetMagic, 4)) throw FormatError("not a dataset file (bad magic)");
    if (const auto v = r.u32(); v != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(v));
    if (r.u32() != kEndianTag) throw FormatError("dataset endianness tag mismatch");
    Dataset ds;
    ds.config = read_dataset_config(r);
    try {
        ds.config.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("dataset header: ") + e.what());
    }
    const auto& c = ds.config;
    const auto count = r.u64();
    if (count > r.remaining()) throw FormatError("record count exceeds file size");
    ds.records.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t i = 0; i < count; ++i) {
        DatasetRecord rec;
        const auto n_events = r.u32();
        rec.scene.clip_length = r.f64();
        if (n_events > static_cast<std::uint32_t>(c.max_events)) throw FormatError("record has more events than max_events");
        for (std::uint32_t e = 0; e < n_events; ++e) {
            SceneEvent ev;
            ev.onset = r.f64();
            ev.duration = r.f64();
            ev.cls = static_cast<int>(r.u32());
            if (ev.cls < 0 || ev.cls >= c.classes) {
                throw FormatError("record " + std::to_string(i) + " has class " + std::to_string(ev.cls) +
                                  " but the header declares " + std::to_string(c.classes) + " classes");
            }
            rec.scene.events.push_back(ev);
        }
        rec.sync = detail::read_sequence(r);
        rec.semantic = detail::read_sequence(r);
        if (rec.sync.length() != c.sync_frames || rec.semantic.length() != c.semantic_frames ||
            rec.sync.dim() != c.feature_dim || rec.semantic.dim() != c.feature_dim) {
            throw FormatError("record " + std::to_string(i) + " feature shape disagrees with the header");
        }
        const auto pd = r.u32();
        if (pd != static_cast<std::uint32_t>(c.feature_dim)) throw FormatError("prompt dim disagrees with the header");
        rec.prompt.resize(1, pd);
        for (std::uint32_t k = 0; k < pd; ++k) rec.prompt(0, k) = r.f32();
        const auto F = r.u32();
        const auto T = r.u32();
        if (F != static_cast<std::uint32_t>(c.F()) || T != static_cast<std::uint32_t>(c.T())) {
            throw FormatError("token grid shape disagrees with the header");
        }
        rec.tokens = TokenMap(static_cast<int>(F), static_cast<int>(T), c.vocab);
        for (auto& id : rec.tokens.ids) {
            id = r.u16();
            if (id >= c.vocab) throw FormatError("token id outside the vocabulary");
        }
        ds.records.push_back(std::move(rec));
    }
    if (!r.done()) throw FormatError("trailing bytes after the last record");
    return ds;
}

inline void write_dataset(const std::string& path, const Dataset& ds) { write_file(path, encode_dataset(ds)); }

inline Dataset read_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

}  // namespace smfoley
