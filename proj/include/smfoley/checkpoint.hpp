#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smfoley/backbone.hpp"
#include "smfoley/binary_io.hpp"
#include "smfoley/controlnet.hpp"
#include "smfoley/gradcheck.hpp"

// Checkpoint layout (little-endian):
//   "SMFC" u32 version u32 endian-tag
//   then tagged sections: 4-byte tag, u64 payload length, payload
//     CONF  model config
//     BONE  backbone tensors in declaration order (name, rows, cols, f64 data)
//     CNET  controlnet: n_copy, backbone hash, aligner shape, tensors
//     OPTM  optimizer moments and the number of completed steps

namespace smfoley {

struct OptimizerState {
    std::uint64_t step = 0;  // completed updates
    std::vector<Mat> m;
    std::vector<Mat> v;
};

struct Checkpoint {
    BackboneParams backbone;
    std::optional<ControlNetParams> controlnet;
    std::optional<OptimizerState> optimizer;
};

inline constexpr char kCheckpointMagic[4] = {'S', 'M', 'F', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class Params>
void write_tensors(BinaryWriter& w, const Params& p) {
    const auto tensors = named_tensors(p);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
        w.str(name);
        w.mat(*m);
    }
}

template <class Params>
void read_tensors(BinaryReader& r, Params& p) {
    auto tensors = named_tensors(p);
    if (r.u32() != tensors.size()) throw FormatError("checkpoint tensor count does not match the configuration");
    for (auto& [name, m] : tensors) {
        const auto stored = r.str();
        if (stored != name) throw FormatError("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
        Mat value = r.mat();
        if (value.rows() != m->rows() || value.cols() != m->cols()) {
            throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
        }
        *m = std::move(value);
    }
}

inline void write_model_config(BinaryWriter& w, const ModelConfig& c) {
    for (int v : {c.depth, c.dim, c.heads, c.ff_dim, c.vocab, c.geometry.mel_bins, c.geometry.frames, c.geometry.patch,
                  c.condition_dim}) {
        w.u32(static_cast<std::uint32_t>(v));
    }
}

inline ModelConfig read_model_config(BinaryReader& r) {
    ModelConfig c;
    c.depth = static_cast<int>(r.u32());
    c.dim = static_cast<int>(r.u32());
    c.heads = static_cast<int>(r.u32());
    c.ff_dim = static_cast<int>(r.u32());
    c.vocab = static_cast<int>(r.u32());
    c.geometry.mel_bins = static_cast<int>(r.u32());
    c.geometry.frames = static_cast<int>(r.u32());
    c.geometry.patch = static_cast<int>(r.u32());
    c.condition_dim = static_cast<int>(r.u32());
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    return c;
}

/// Allocates a zero backbone of the right shape without drawing random numbers.
inline BackboneParams backbone_skeleton(const ModelConfig& c) {
    Rng rng(0);
    auto p = init_backbone(c, rng);
    p.visit([](const std::string&, Mat& m) { m.setZero(); });
    return p;
}

inline void section(BinaryWriter& w, const char tag[4], const BinaryWriter& payload) {
    w.bytes(std::string_view(tag, 4));
    w.u64(payload.data().size());
    w.bytes(payload.data());
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    BinaryWriter w;
    w.bytes(std::string_view(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(kEndianTag);
    {
        BinaryWriter s;
        detail::write_model_config(s, ck.backbone.config);
        detail::section(w, "CONF", s);
    }
    {
        BinaryWriter s;
        detail::write_tensors(s, ck.backbone);
        detail::section(w, "BONE", s);
    }
    if (ck.controlnet) {
        const auto& cn = *ck.controlnet;
        BinaryWriter s;
        s.u32(static_cast<std::uint32_t>(cn.n_copy));
        s.u64(cn.backbone_fingerprint);
        s.u32(static_cast<std::uint32_t>(cn.aligner.kernel_size));
        s.u32(static_cast<std::uint32_t>(cn.aligner.in_dim));
        s.u32(static_cast<std::uint32_t>(cn.aligner.out_dim));
        s.u32(static_cast<std::uint32_t>(cn.aligner.target_len));
        detail::write_tensors(s, cn);
        detail::section(w, "CNET", s);
    }
    if (ck.optimizer) {
        const auto& o = *ck.optimizer;
        BinaryWriter s;
        s.u64(o.step);
        s.u32(static_cast<std::uint32_t>(o.m.size()));
        for (std::size_t i = 0; i < o.m.size(); ++i) {
            s.mat(o.m[i]);
            s.mat(o.v[i]);
        }
        detail::section(w, "OPTM", s);
    }
    return w.data();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    BinaryReader r(bytes);
    if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("not a checkpoint file (bad magic)");
    if (const auto v = r.u32(); v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
    if (r.u32() != kEndianTag) throw FormatError("checkpoint endianness tag mismatch");

    Checkpoint ck;
    bool have_config = false;
    bool have_backbone = false;
    while (!r.done()) {
        const std::string tag(r.bytes(4));
        const auto len = r.u64();
        if (len > r.remaining()) throw FormatError("checkpoint section '" + tag + "' runs past end of file");
        BinaryReader s(r.bytes(static_cast<std::size_t>(len)));
        if (tag == "CONF") {
            ck.backbone = detail::backbone_skeleton(detail::read_model_config(s));
            have_config = true;
        } else if (tag == "BONE") {
            if (!have_config) throw FormatError("checkpoint BONE section before CONF");
            detail::read_tensors(s, ck.backbone);
            have_backbone = true;
        } else if (tag == "CNET") {
            if (!have_backbone) throw FormatError("checkpoint CNET section before BONE");
            ControlNetParams cn;
            cn.n_copy = static_cast<int>(s.u32());
            cn.backbone_fingerprint = s.u64();
            const int k = static_cast<int>(s.u32());
            const int in_dim = static_cast<int>(s.u32());
            const int out_dim = static_cast<int>(s.u32());
            const int target = static_cast<int>(s.u32());
            const auto& c = ck.backbone.config;
            if (cn.n_copy < 1 || cn.n_copy > c.depth || out_dim != c.dim || target != c.T() || k < 1 || k % 2 == 0 ||
                in_dim < 1) {
                throw FormatError("checkpoint controlnet header is inconsistent with the backbone");
            }
            cn.aligner = ProjectionBlockParams::zeros(k, in_dim, out_dim, target);
            cn.ctrl_w = Mat::Zero(c.dim, c.dim);
            cn.ctrl_b = Mat::Zero(1, c.dim);
            cn.blocks.assign(static_cast<std::size_t>(cn.n_copy), nn::BlockParams::zeros(c.dim, c.ff_dim));
            cn.conn_w.assign(static_cast<std::size_t>(cn.n_copy), Mat::Zero(c.dim, c.dim));
            cn.conn_b.assign(static_cast<std::size_t>(cn.n_copy), Mat::Zero(1, c.dim));
            detail::read_tensors(s, cn);
            ck.controlnet = std::move(cn);
        } else if (tag == "OPTM") {
            OptimizerState o;
            o.step = s.u64();
            const auto n = s.u32();
            for (std::uint32_t i = 0; i < n; ++i) {
                o.m.push_back(s.mat());
                o.v.push_back(s.mat());
            }
            ck.optimizer = std::move(o);
        } else {
            throw FormatError("unknown checkpoint section '" + tag + "'");
        }
        if (!s.done()) throw FormatError("checkpoint section '" + tag + "' has trailing bytes");
    }
    if (!have_backbone) throw FormatError("checkpoint has no backbone section");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

/// Loads the ControlNet section of `path` and checks it was built on `backbone`.
inline ControlNetParams load_controlnet(const std::string& path, const BackboneParams& backbone) {
    auto ck = load_checkpoint(path);
    if (!ck.controlnet) throw FormatError(path + " has no controlnet section");
    if (ck.controlnet->backbone_fingerprint != backbone_hash(backbone)) {
        throw ConfigError(path + " was built on a different backbone (hash mismatch)");
    }
    return std::move(*ck.controlnet);
}

}  // namespace smfoley
