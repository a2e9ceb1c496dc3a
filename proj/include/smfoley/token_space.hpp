#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smfoley/common.hpp"

namespace smfoley {

/// Spectrogram size and square patch side; the token grid is F x T.
struct PatchGeometry {
    int mel_bins = 80;
    int frames = 848;
    int patch = 16;

    int F() const { return mel_bins / patch; }
    int T() const { return frames / patch; }
    int positions() const { return F() * T(); }

    void validate() const {
        if (patch < 1 || mel_bins < 1 || frames < 1) {
            throw GeometryError("patch geometry needs positive sizes");
        }
        if (mel_bins % patch != 0 || frames % patch != 0) {
            throw GeometryError("patch " + std::to_string(patch) + " does not divide " + std::to_string(mel_bins) +
                                "x" + std::to_string(frames));
        }
    }

    bool operator==(const PatchGeometry&) const = default;
};

struct GridSize {
    int F;
    int T;
    bool operator==(const GridSize&) const = default;
};

inline GridSize patch_grid(const PatchGeometry& g) {
    g.validate();
    return {g.F(), g.T()};
}

/// F x T grid of codebook ids. The id `vocab` is the MASK sentinel.
struct TokenMap {
    int F = 0;
    int T = 0;
    int vocab = 0;
    std::vector<std::int32_t> ids;  // row-major, rows are frequency

    TokenMap() = default;
    TokenMap(int f, int t, int v, std::int32_t fill = 0) : F(f), T(t), vocab(v), ids(static_cast<std::size_t>(f) * t, fill) {}

    std::int32_t mask_id() const { return vocab; }
    int size() const { return F * T; }
    std::int32_t& at(int f, int t) { return ids[static_cast<std::size_t>(f) * T + t]; }
    std::int32_t at(int f, int t) const { return ids[static_cast<std::size_t>(f) * T + t]; }

    /// Checks dimensions and that every entry is a codebook id or, if allowed, the sentinel.
    void validate(bool allow_mask = false) const {
        if (F < 1 || T < 1 || vocab < 1 || ids.size() != static_cast<std::size_t>(F) * T) {
            throw ShapeError("token map dimensions are inconsistent");
        }
        for (auto id : ids) {
            const bool ok = (id >= 0 && id < vocab) || (allow_mask && id == vocab);
            if (!ok) throw ArgumentError("token id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
        }
    }

    bool operator==(const TokenMap&) const = default;
};

struct MaskedTokenMap {
    TokenMap tokens;
    std::vector<std::uint8_t> mask;  // 1 = hidden

    int masked_count() const { return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1})); }

    static MaskedTokenMap fully_masked(int F, int T, int vocab) {
        MaskedTokenMap m;
        m.tokens = TokenMap(F, T, vocab, vocab);
        m.mask.assign(static_cast<std::size_t>(F) * T, 1);
        return m;
    }

    bool operator==(const MaskedTokenMap&) const = default;
};

/// Cosine masking schedule: fraction of tokens still hidden at progress u.
inline double mask_fraction(double u) {
    if (!(u >= 0.0 && u <= 1.0)) throw ArgumentError("mask_fraction: u must lie in [0, 1]");
    if (u == 1.0) return 0.0;
    return std::cos(u * kPi / 2.0);
}

/// Number of tokens still masked after each of `steps` decoding steps.
inline std::vector<int> masked_remaining(int total, int steps) {
    if (total < 1 || steps < 1) throw ArgumentError("unmask_plan: total and steps must be >= 1");
    std::vector<int> remaining(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        if (k == steps - 1) {
            remaining[k] = 0;
        } else {
            const double frac = mask_fraction(static_cast<double>(k + 1) / steps);
            remaining[k] = static_cast<int>(std::floor(total * frac));
        }
    }
    return remaining;
}

/// Per-step reveal counts; they sum to `total` and the last step reveals the remainder.
inline std::vector<int> unmask_plan(int total, int steps) {
    const auto remaining = masked_remaining(total, steps);
    std::vector<int> reveal(remaining.size());
    int prev = total;
    for (std::size_t k = 0; k < remaining.size(); ++k) {
        reveal[k] = prev - remaining[k];
        prev = remaining[k];
    }
    return reveal;
}

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

/// Hides exactly round(F*T*fraction) positions chosen uniformly without replacement.
inline MaskedTokenMap apply_random_mask(const TokenMap& map, double fraction, Rng& rng) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ArgumentError("apply_random_mask: fraction must lie in [0, 1]");
    const int n = map.size();
    const int count = std::clamp(round_half_up(n * fraction), 0, n);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < count; ++i) {
        const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(order[i], order[j]);
    }

    MaskedTokenMap out;
    out.tokens = map;
    out.mask.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < count; ++i) {
        out.mask[order[i]] = 1;
        out.tokens.ids[order[i]] = map.mask_id();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Text/image output. CSV rows are frequency bins, columns are time steps.

inline std::string to_csv(const TokenMap& map) {
    std::ostringstream os;
    for (int f = 0; f < map.F; ++f) {
        for (int t = 0; t < map.T; ++t) {
            if (t) os << ',';
            os << map.at(f, t);
        }
        os << '\n';
    }
    return os.str();
}

inline TokenMap from_csv(const std::string& text, int vocab) {
    TokenMap map;
    map.vocab = vocab;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        int cols = 0;
        while (std::getline(ls, cell, ',')) {
            map.ids.push_back(std::stoi(cell));
            ++cols;
        }
        if (map.F == 0) map.T = cols;
        if (cols != map.T) throw FormatError("ragged token CSV");
        ++map.F;
    }
    map.validate(true);
    return map;
}

/// Binary PGM heatmap; gray level is id * 255 / vocab, each token drawn as a scale x scale block.
inline std::string to_pgm(const TokenMap& map, int scale = 8) {
    const int w = map.T * scale;
    const int h = map.F * scale;
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto id = map.at(y / scale, x / scale);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(id, 0, map.vocab) * 255 / map.vocab)));
        }
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace smfoley
