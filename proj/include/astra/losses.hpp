#pragma once

// Trajectory losses: per-step base losses (MSE, smooth L1 averaged over
// coordinates), the weighted-penalty schedules, best-of-K selection, and
// the final objective with its KL term.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/tensor.hpp"

namespace astra {

enum class PenaltyKind { uniform, linear, quadratic, parabolic };

inline const char* penalty_kind_name(PenaltyKind kind) {
    switch (kind) {
        case PenaltyKind::uniform:
            return "uniform";
        case PenaltyKind::linear:
            return "linear";
        case PenaltyKind::quadratic:
            return "quadratic";
        case PenaltyKind::parabolic:
            return "parabolic";
    }
    return "?";
}

struct PenaltySchedule {
    PenaltyKind kind = PenaltyKind::parabolic;
    double alpha = 2.0;
    double beta = 1.0;
    std::size_t t_pred = 12;

    // Training configs additionally require alpha, beta > 0; the formulas
    // themselves are defined for any nonnegative bounds.
    void validate() const {
        if (t_pred < 1) {
            throw ConfigError("PenaltySchedule: t_pred must be at least 1");
        }
        if (kind == PenaltyKind::parabolic && !(alpha > beta)) {
            throw ConfigError("PenaltySchedule: parabolic requires alpha > beta, got alpha=" +
                              std::to_string(alpha) + " beta=" + std::to_string(beta));
        }
    }
};

// Weight for prediction step t. The loss sums t = 1..t_pred; t = 0 is also
// accepted so the schedule's limit values can be inspected directly.
inline double penalty_weight(const PenaltySchedule& s, std::size_t t) {
    s.validate();
    if (t > s.t_pred) {
        throw ContractError("penalty_weight: t " + std::to_string(t) + " beyond horizon " +
                            std::to_string(s.t_pred));
    }
    const double frac = static_cast<double>(t) / static_cast<double>(s.t_pred);
    switch (s.kind) {
        case PenaltyKind::uniform:
            return 1.0;
        case PenaltyKind::linear:
            return s.alpha + frac * (s.beta - s.alpha);
        case PenaltyKind::quadratic: {
            const double w = s.alpha + frac * (s.beta - s.alpha);
            return w * w;
        }
        case PenaltyKind::parabolic:
            return (s.alpha - s.beta) * (2.0 * frac - 1.0) * (2.0 * frac - 1.0) + s.beta;
    }
    throw ContractError("penalty_weight: unknown schedule kind");
}

enum class BaseLossKind { mse, smooth_l1 };

inline const char* base_loss_name(BaseLossKind kind) {
    return kind == BaseLossKind::mse ? "mse" : "smooth_l1";
}

// Per-step base loss averaged over coordinates, as a [T_pred x 1] column.
inline Tensor base_loss_per_step(const Tensor& pred, const Tensor& gt, BaseLossKind kind) {
    detail::require_rank(pred, 2, "base_loss");
    detail::require_same_shape(pred, gt, "base_loss");
    Tensor diff = sub(pred, gt);
    Tensor per_coord = kind == BaseLossKind::mse ? mul(diff, diff) : smooth_l1(diff);
    const std::size_t c = pred.dim(1);
    return matmul(per_coord, Tensor::full({c, 1}, 1.0 / static_cast<double>(c)));
}

inline double base_loss(const Tensor& pred_t, const Tensor& gt_t, BaseLossKind kind) {
    Tensor pred_row = pred_t.rank() == 1 ? reshape(pred_t, {1, pred_t.size()}) : pred_t;
    Tensor gt_row = gt_t.rank() == 1 ? reshape(gt_t, {1, gt_t.size()}) : gt_t;
    return base_loss_per_step(pred_row, gt_row, kind).item();
}

// Sum over t = 1..T_pred of penalty_weight(s, t) * base_loss at step t.
// Row r of pred/gt holds prediction step t = r + 1.
inline Tensor weighted_loss(const Tensor& pred, const Tensor& gt, const PenaltySchedule& s,
                            BaseLossKind kind) {
    detail::require_rank(pred, 2, "weighted_loss");
    detail::require_same_shape(pred, gt, "weighted_loss");
    if (pred.dim(0) != s.t_pred) {
        throw ShapeError("weighted_loss: " + std::to_string(pred.dim(0)) +
                         " prediction steps for a horizon of " + std::to_string(s.t_pred));
    }
    Tensor per_step = base_loss_per_step(pred, gt, kind);  // [T x 1]
    std::vector<double> weights(s.t_pred);
    for (std::size_t t = 1; t <= s.t_pred; ++t) {
        weights[t - 1] = penalty_weight(s, t);
    }
    return reshape(matmul(Tensor({1, s.t_pred}, std::move(weights)), per_step), {1});
}

struct BestOfK {
    Tensor loss;
    std::size_t best_index = 0;
};

// Minimum weighted loss over K candidate trajectories. Only the winning
// branch stays on the gradient path.
inline BestOfK best_of_k_loss(std::span<const Tensor> samples, const Tensor& gt,
                              const PenaltySchedule& s, BaseLossKind kind) {
    if (samples.empty()) {
        throw ContractError("best_of_k_loss: K must be at least 1");
    }
    BestOfK best;
    double best_value = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
        Tensor loss = weighted_loss(samples[k], gt, s, kind);
        if (k == 0 || loss.item() < best_value) {
            best_value = loss.item();
            best.loss = loss;
            best.best_index = k;
        }
    }
    return best;
}

// traj_term + kl_coeff * kl. Deterministic mode passes kl = 0.
inline Tensor final_loss(const Tensor& traj_term, const Tensor& kl, double kl_coeff) {
    if (traj_term.size() != 1 || kl.size() != 1) {
        throw ShapeError("final_loss: both terms must be scalars");
    }
    if (kl.item() < 0.0) {
        throw ContractError("final_loss: negative KL term " + std::to_string(kl.item()));
    }
    return add(traj_term, scale(kl, kl_coeff));
}

}  // namespace astra
