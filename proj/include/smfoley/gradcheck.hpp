#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "smfoley/common.hpp"

namespace smfoley {

/// Flattens any visitable parameter struct into (name, tensor) pairs in declaration order.
template <class Params>
std::vector<std::pair<std::string, Mat*>> named_tensors(Params& p) {
    std::vector<std::pair<std::string, Mat*>> out;
    p.visit([&](const std::string& name, Mat& m) { out.emplace_back(name, &m); });
    return out;
}

template <class Params>
std::vector<std::pair<std::string, const Mat*>> named_tensors(const Params& p) {
    std::vector<std::pair<std::string, const Mat*>> out;
    p.visit([&](const std::string& name, const Mat& m) { out.emplace_back(name, &m); });
    return out;
}

/// |a - n| / max(|a| + |n|, floor). The floor keeps coordinates whose true gradient is
/// zero from turning central-difference round-off into a huge ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::map<std::string, double> per_group;  // tensor name -> worst relative error
    int coordinates = 0;
};

/// Central-difference check of `analytic` against `loss(params)`, sampling up to
/// `samples_per_group` coordinates from every tensor. Parameters are restored afterwards.
template <class Params, class LossFn>
GradCheckResult finite_diff_check(Params& params, const Params& analytic, LossFn&& loss, double epsilon,
                                  int samples_per_group, Rng& rng) {
    GradCheckResult result;
    auto values = named_tensors(params);
    auto grads = named_tensors(analytic);
    if (values.size() != grads.size()) throw ShapeError("finite_diff_check: gradient layout mismatch");
    for (std::size_t t = 0; t < values.size(); ++t) {
        Mat& m = *values[t].second;
        const Mat& g = *grads[t].second;
        require_shape(g, m.rows(), m.cols(), "finite_diff_check gradient");
        const auto size = static_cast<std::uint64_t>(m.size());
        const int draws = static_cast<int>(std::min<std::uint64_t>(size, static_cast<std::uint64_t>(samples_per_group)));
        double worst = 0.0;
        for (int s = 0; s < draws; ++s) {
            const auto idx = static_cast<Eigen::Index>(draws == static_cast<int>(size) ? s : rng.below(size));
            double& x = m.data()[idx];
            const double saved = x;
            x = saved + epsilon;
            const double up = loss(params);
            x = saved - epsilon;
            const double down = loss(params);
            x = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("finite_diff_check: non-finite loss");
            const double numeric = (up - down) / (2.0 * epsilon);
            worst = std::max(worst, relative_error(g.data()[idx], numeric));
            ++result.coordinates;
        }
        result.per_group[values[t].first] = worst;
        result.max_relative_error = std::max(result.max_relative_error, worst);
    }
    return result;
}

}  // namespace smfoley
