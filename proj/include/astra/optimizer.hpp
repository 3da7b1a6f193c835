#pragma once

// AdamW with decoupled weight decay plus the cosine learning-rate schedule.
// Moment buffers are keyed by parameter name so optimizer state can be
// checkpointed and restored independently of registration order.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "astra/errors.hpp"
#include "astra/params.hpp"

namespace astra {

struct OptimizerState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;
    std::size_t step = 0;
    std::unordered_map<std::string, std::vector<double>> m;
    std::unordered_map<std::string, std::vector<double>> v;
};

// theta <- theta - lr * mhat/(sqrt(vhat) + eps) - lr * wd * theta, with
// bias-corrected moments. Reads each parameter's accumulated gradient and
// leaves it untouched; callers zero gradients between steps.
inline void adamw_step(ModelParams& params, OptimizerState& state) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& [name, t] : params.entries()) {
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(t.size(), 0.0);
            v.assign(t.size(), 0.0);
        }
        if (m.size() != t.size()) {
            throw ContractError("adamw_step: state size " + std::to_string(m.size()) +
                                " does not match parameter '" + name + "' of size " +
                                std::to_string(t.size()));
        }
        const auto grad = t.grad();
        auto theta = t.mutable_data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g = grad[i];
            if (!std::isfinite(g)) {
                throw NumericError("adamw_step: non-finite gradient in '" + name + "'");
            }
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] -= state.lr * (mhat / (std::sqrt(vhat) + state.eps)) +
                        state.lr * state.weight_decay * theta[i];
        }
    }
}

// lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * t / total)); one
// annealing period spanning the whole run, no restarts.
inline double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min) {
    if (total < 1) {
        throw ContractError("cosine_lr: total must be at least 1");
    }
    if (t > total) {
        throw ContractError("cosine_lr: t = " + std::to_string(t) + " beyond total " +
                            std::to_string(total));
    }
    const double phase =
        std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

}  // namespace astra
