#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "surgecast/random.hpp"
#include "surgecast/tensor.hpp"

namespace surgecast {

struct GradCheckOptions {
    double step = 1e-5;
    /// Coordinates checked per input; 0 checks every coordinate. When
    /// limited, the subset is drawn from `seed`.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all
    /// checked coordinates; 0 when both are zero.
    double rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t coords = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

/// Compares reverse-mode gradients of the scalar returned by `loss` against
/// central finite differences in each input. `loss` must rebuild its graph
/// from the current input values on every call.
template <typename LossFn>
GradCheckResult check_gradients(std::vector<Tensor<double>> inputs, LossFn&& loss, GradCheckOptions opt = {}) {
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> out = loss();
    out.backward();

    GradCheckResult r;
    Rng pick(opt.seed);
    for (auto& in : inputs) {
        const std::vector<double> grad(in.grad().begin(), in.grad().end());
        std::vector<std::size_t> ids(in.numel());
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        if (opt.max_coords != 0 && ids.size() > opt.max_coords) {
            for (std::size_t i = 0; i < opt.max_coords; ++i) {
                std::swap(ids[i], ids[i + pick.below(ids.size() - i)]);
            }
            ids.resize(opt.max_coords);
        }
        auto values = in.mutable_data();
        for (std::size_t id : ids) {
            const double saved = values[id];
            values[id] = saved + opt.step;
            const double up = loss().item();
            values[id] = saved - opt.step;
            const double down = loss().item();
            values[id] = saved;
            r.analytic.push_back(grad[id]);
            r.numeric.push_back((up - down) / (2.0 * opt.step));
        }
    }

    double diff = 0.0;
    double na = 0.0;
    double nn = 0.0;
    for (std::size_t i = 0; i < r.analytic.size(); ++i) {
        const double d = r.analytic[i] - r.numeric[i];
        diff += d * d;
        na += r.analytic[i] * r.analytic[i];
        nn += r.numeric[i] * r.numeric[i];
        r.max_abs_error = std::max(r.max_abs_error, std::abs(d));
    }
    const double scale = std::sqrt(std::max(na, nn));
    r.rel_error = scale > 0.0 ? std::sqrt(diff) / scale : 0.0;
    r.coords = r.analytic.size();
    return r;
}

}  // namespace surgecast
