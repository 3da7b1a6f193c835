#pragma once

// Central finite-difference verification of reverse-mode gradients.
//
// The checker evaluates f twice per probed coordinate (x+h, x-h), compares
// (f+ - f-) / 2h against the analytic gradient from one backward sweep, and
// reports the worst relative error |analytic - numeric| / max(1, |analytic|).
// Coordinates the caller flags as lying within h of a non-smooth kink
// (|x| = 1 for smooth L1, clamp edges, relu at 0) are skipped and counted.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct GradCheckOptions {
    double h = 1e-5;
    // 0 probes every coordinate; otherwise this many per leaf, sampled
    // deterministically from sample_seed.
    std::size_t max_coords_per_leaf = 0;
    std::uint64_t sample_seed = 17;
    // Returns true when perturbing this coordinate crosses a kink.
    std::function<bool(std::size_t leaf, std::size_t coord)> near_kink;
};

struct GradCheckResult {
    std::size_t checked = 0;
    std::size_t skipped = 0;
    double max_rel_err = 0.0;
    std::string worst;

    bool pass(double tol) const { return max_rel_err < tol; }
};

// f must rebuild its graph from the current leaf values on every call and
// return a scalar. Leaves must have requires_grad set.
inline GradCheckResult gradient_check(const std::function<Tensor()>& f, std::span<Tensor> leaves,
                                      const GradCheckOptions& opts = {}) {
    if (!(opts.h >= 1e-7 && opts.h <= 1e-3)) {
        throw ContractError("gradient_check: step h outside [1e-7, 1e-3]");
    }
    for (auto& leaf : leaves) {
        if (!leaf.requires_grad()) {
            throw ContractError("gradient_check: leaf without requires_grad");
        }
        leaf.zero_grad();
    }

    Tensor out = f();
    if (out.size() != 1) {
        throw ContractError("gradient_check: f must return a scalar");
    }
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        const auto g = leaf.grad();
        analytic.emplace_back(g.begin(), g.end());
    }

    GradCheckResult result;
    Rng sampler(opts.sample_seed);
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        auto values = leaves[l].mutable_data();
        std::vector<std::size_t> coords(values.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.max_coords_per_leaf > 0 && coords.size() > opts.max_coords_per_leaf) {
            sampler.shuffle(coords);
            coords.resize(opts.max_coords_per_leaf);
        }
        for (std::size_t c : coords) {
            if (opts.near_kink && opts.near_kink(l, c)) {
                ++result.skipped;
                continue;
            }
            const double saved = values[c];
            values[c] = saved + opts.h;
            const double f_plus = f().item();
            values[c] = saved - opts.h;
            const double f_minus = f().item();
            values[c] = saved;

            const double numeric = (f_plus - f_minus) / (2.0 * opts.h);
            const double a = analytic[l][c];
            if (std::isnan(a) || std::isnan(numeric)) {
                throw NumericError("gradient_check: NaN at leaf " + std::to_string(l) +
                                   " coordinate " + std::to_string(c));
            }
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            ++result.checked;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                std::ostringstream os;
                os << "leaf " << l << " coord " << c << ": analytic " << a << ", numeric "
                   << numeric;
                result.worst = os.str();
            }
        }
    }
    return result;
}

}  // namespace astra
