#pragma once

#include "smfoley/smfoley.hpp"

namespace smfoley::testing {

/// Small model for gradient checks: 2 x 4 grid, D = 16.
inline ModelConfig tiny_model(int depth = 2) {
    ModelConfig c;
    c.depth = depth;
    c.dim = 16;
    c.heads = 2;
    c.ff_dim = 32;
    c.vocab = 16;
    c.geometry = {32, 64, 16};
    c.condition_dim = 4;
    return c;
}

/// The toy configuration used by the end-to-end runs (5 x 53 grid, D = 64).
inline RunConfig toy_run_config() {
    RunConfig rc;
    rc.model.depth = 4;
    rc.model.dim = 64;
    rc.model.heads = 4;
    rc.model.ff_dim = 128;
    rc.model.vocab = 64;
    rc.n_copy = 2;
    rc.data.classes = 4;
    rc.data.feature_dim = 8;
    rc.seed = 7;
    rc.resolve();
    return rc;
}

inline TokenMap random_map(int F, int T, int vocab, Rng& rng) {
    TokenMap m(F, T, vocab);
    for (auto& id : m.ids) id = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
    return m;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
    return m;
}

/// Perturbs every parameter so that zero-initialized pieces stop hiding bugs.
template <class Params>
void jitter(Params& p, Rng& rng, double scale = 0.1) {
    p.visit([&](const std::string&, Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.normal() * scale;
    });
}

}  // namespace smfoley::testing
