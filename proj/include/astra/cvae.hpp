#pragma once

// Condition fusion and the CVAE decoder family: prior and recognition
// networks emitting diagonal Gaussians, reparameterized sampling, the
// generation network, and displacement decoding anchored at the last
// observed position. The deterministic path decodes straight from the
// condition vector.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"

namespace astra {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

// Diagonal Gaussians, one row per agent: mu/logvar are [n x d_z].
struct GaussianParams {
    Tensor mu;
    Tensor logvar;
};

// Per-agent condition c_a = concat(mean over frames of the scene encoding,
// mean over agent a's tokens of the agent encoding). Agent tokens are
// frame-major: row t*A + a belongs to agent a.
inline Tensor condition_vector(const Tensor& scene_emb, const Tensor& agent_emb,
                               std::size_t a_count) {
    detail::require_rank(scene_emb, 2, "condition_vector(scene)");
    detail::require_rank(agent_emb, 2, "condition_vector(agents)");
    const std::size_t t_obs = scene_emb.dim(0);
    if (a_count == 0 || agent_emb.dim(0) != a_count * t_obs) {
        throw ShapeError("condition_vector: " + std::to_string(agent_emb.dim(0)) +
                         " agent tokens for " + std::to_string(a_count) + " agents x " +
                         std::to_string(t_obs) + " frames");
    }
    Tensor frame_mean =
        matmul(Tensor::full({1, t_obs}, 1.0 / static_cast<double>(t_obs)), scene_emb);
    std::vector<Tensor> rows;
    rows.reserve(a_count);
    for (std::size_t a = 0; a < a_count; ++a) {
        std::vector<std::size_t> idx(t_obs);
        for (std::size_t t = 0; t < t_obs; ++t) {
            idx[t] = t * a_count + a;
        }
        Tensor own = gather_rows(agent_emb, std::move(idx));
        Tensor own_mean =
            matmul(Tensor::full({1, t_obs}, 1.0 / static_cast<double>(t_obs)), own);
        rows.push_back(concat_cols({frame_mean, own_mean}));
    }
    return concat_rows(std::span<const Tensor>(rows));
}

// Splits a [n x 2*d_z] head output into clamped Gaussian parameters.
inline GaussianParams gaussian_head(const Tensor& head_out) {
    detail::require_rank(head_out, 2, "gaussian_head");
    if (head_out.dim(1) % 2 != 0) {
        throw ShapeError("gaussian_head: output width " + std::to_string(head_out.dim(1)) +
                         " is not 2*d_z");
    }
    const std::size_t d_z = head_out.dim(1) / 2;
    GaussianParams g;
    g.mu = slice_cols(head_out, 0, d_z);
    g.logvar = clamp(slice_cols(head_out, d_z, d_z), kLogVarMin, kLogVarMax);
    return g;
}

inline GaussianParams prior_params(const Tensor& condition,
                                   std::span<const DenseLayer> prior_net) {
    return gaussian_head(mlp_forward(condition, prior_net));
}

// Recognition network q(z | c, Y): the future trajectory is embedded by
// future_net, concatenated onto the condition, then mapped like the prior.
inline GaussianParams posterior_params(const Tensor& condition, const Tensor& future_flat,
                                       std::span<const DenseLayer> future_net,
                                       std::span<const DenseLayer> posterior_net) {
    detail::require_rank(future_flat, 2, "posterior_params(future)");
    if (future_flat.dim(0) != condition.dim(0)) {
        throw ShapeError("posterior_params: " + std::to_string(future_flat.dim(0)) +
                         " future rows for " + std::to_string(condition.dim(0)) + " conditions");
    }
    Tensor future_emb = mlp_forward(future_flat, future_net);
    return gaussian_head(mlp_forward(concat_cols({condition, future_emb}), posterior_net));
}

// z = mu + exp(0.5 * logvar) * noise, differentiable in mu and logvar.
inline Tensor reparameterize(const GaussianParams& g, const Tensor& noise) {
    detail::require_same_shape(g.mu, g.logvar, "reparameterize");
    detail::require_same_shape(g.mu, noise, "reparameterize");
    return add(g.mu, mul(exp(scale(g.logvar, 0.5)), noise));
}

// KL(q || p) for diagonal Gaussians, summed over rows and dimensions:
// sum_i [ 0.5*(logvar_p - logvar_q) + (var_q + (mu_q - mu_p)^2)/(2 var_p) - 0.5 ].
inline Tensor kl_divergence(const GaussianParams& q, const GaussianParams& p) {
    detail::require_same_shape(q.mu, p.mu, "kl_divergence");
    detail::require_same_shape(q.logvar, p.logvar, "kl_divergence");
    detail::require_same_shape(q.mu, q.logvar, "kl_divergence");
    Tensor log_ratio = scale(sub(p.logvar, q.logvar), 0.5);
    Tensor diff = sub(q.mu, p.mu);
    Tensor numer = add(exp(q.logvar), mul(diff, diff));
    Tensor quad = scale(mul(numer, exp(neg(p.logvar))), 0.5);
    return sum_stable(add_scalar(add(log_ratio, quad), -0.5));
}

// Generation network. condition_on_c keeps the latent informative: with an
// unconditioned generator the prior/recognition conditioning would be dead
// weight. Toggleable for the strict-reading variant.
inline Tensor generate(const Tensor& condition, const Tensor& z,
                       std::span<const DenseLayer> generation_net, bool condition_on_c = true) {
    Tensor input = condition_on_c ? concat_cols({condition, z}) : z;
    return mlp_forward(input, generation_net);
}

// Decodes per-agent displacement sequences and integrates them from each
// agent's last observed position. input rows: one per agent (condition in
// deterministic mode, future latent in stochastic mode). last_obs: [A x C].
inline std::vector<Tensor> decode_displacements(const Tensor& input,
                                                std::span<const DenseLayer> decoder_net,
                                                const Tensor& last_obs, std::size_t t_pred,
                                                std::size_t coord_dim) {
    detail::require_rank(input, 2, "decode_displacements");
    detail::require_rank(last_obs, 2, "decode_displacements(last_obs)");
    const std::size_t a_count = input.dim(0);
    if (last_obs.dim(0) != a_count || last_obs.dim(1) != coord_dim) {
        throw ShapeError("decode_displacements: last_obs is " +
                         detail::shape_str(last_obs.shape()) + ", expected [" +
                         std::to_string(a_count) + " x " + std::to_string(coord_dim) + "]");
    }
    Tensor flat = mlp_forward(input, decoder_net);
    if (flat.dim(1) != t_pred * coord_dim) {
        throw ShapeError("decode_displacements: decoder emits " + std::to_string(flat.dim(1)) +
                         " values per agent, expected " + std::to_string(t_pred * coord_dim));
    }
    std::vector<Tensor> trajectories;
    trajectories.reserve(a_count);
    for (std::size_t a = 0; a < a_count; ++a) {
        Tensor steps = reshape(gather_rows(flat, {a}), {t_pred, coord_dim});
        Tensor anchor = reshape(gather_rows(last_obs, {a}), {coord_dim});
        trajectories.push_back(bias_add(cumsum_rows(steps), anchor));
    }
    return trajectories;
}

enum class PredictionMode { deterministic, stochastic };

// K decoded trajectories per agent plus the latents that produced them.
struct PredictionSet {
    PredictionMode mode = PredictionMode::deterministic;
    std::size_t k = 1;
    std::size_t t_pred = 0;
    std::size_t coord_dim = 2;
    std::vector<std::int64_t> agent_ids;
    std::vector<double> trajectories;  // [A][K][T_pred][C] row-major
    std::vector<double> latents_used;  // [A][K][d_z], stochastic only
    std::size_t d_z = 0;

    std::size_t agents() const { return agent_ids.size(); }

    std::span<const double> trajectory(std::size_t a, std::size_t sample) const {
        const std::size_t stride = t_pred * coord_dim;
        return std::span<const double>(trajectories)
            .subspan((a * k + sample) * stride, stride);
    }

    std::span<const double> latent(std::size_t a, std::size_t sample) const {
        return std::span<const double>(latents_used).subspan((a * k + sample) * d_z, d_z);
    }
};

struct CvaeNets {
    std::span<const DenseLayer> prior;
    std::span<const DenseLayer> generation;
    std::span<const DenseLayer> decoder;
    bool condition_on_c = true;
};

// K prior draws per agent, decoded. Noise streams are forked per (agent_id,
// sample), so draws travel with agents under any reordering, and the whole
// set is a pure function of (condition, seed, params).
inline PredictionSet sample_trajectories(const Tensor& condition,
                                         const std::vector<std::int64_t>& agent_ids,
                                         const Tensor& last_obs, std::size_t k, Rng noise_root,
                                         const CvaeNets& nets, std::size_t t_pred,
                                         std::size_t coord_dim) {
    if (k < 1) {
        throw ContractError("sample_trajectories: K must be at least 1");
    }
    const std::size_t a_count = condition.dim(0);
    if (agent_ids.size() != a_count) {
        throw ShapeError("sample_trajectories: " + std::to_string(agent_ids.size()) +
                         " agent ids for " + std::to_string(a_count) + " conditions");
    }
    GaussianParams prior = prior_params(condition, nets.prior);
    const std::size_t d_z = prior.mu.dim(1);

    PredictionSet out;
    out.mode = PredictionMode::stochastic;
    out.k = k;
    out.t_pred = t_pred;
    out.coord_dim = coord_dim;
    out.agent_ids = agent_ids;
    out.d_z = d_z;
    out.trajectories.reserve(a_count * k * t_pred * coord_dim);
    out.latents_used.reserve(a_count * k * d_z);

    for (std::size_t a = 0; a < a_count; ++a) {
        Tensor cond_row = gather_rows(condition, {a});
        Tensor last_row = gather_rows(last_obs, {a});
        GaussianParams prior_row{gather_rows(prior.mu, {a}), gather_rows(prior.logvar, {a})};
        Rng agent_rng = noise_root.fork(static_cast<std::uint64_t>(agent_ids[a]));
        for (std::size_t sample = 0; sample < k; ++sample) {
            Rng draw_rng = agent_rng.fork(sample);
            std::vector<double> noise(d_z);
            for (auto& n : noise) {
                n = draw_rng.normal();
            }
            Tensor z = reparameterize(prior_row, Tensor({1, d_z}, noise));
            Tensor y_latent = generate(cond_row, z, nets.generation, nets.condition_on_c);
            auto traj =
                decode_displacements(y_latent, nets.decoder, last_row, t_pred, coord_dim);
            const auto tv = traj[0].data();
            out.trajectories.insert(out.trajectories.end(), tv.begin(), tv.end());
            const auto zv = z.data();
            out.latents_used.insert(out.latents_used.end(), zv.begin(), zv.end());
        }
    }
    for (double v : out.trajectories) {
        if (!std::isfinite(v)) {
            throw NumericError("sample_trajectories: non-finite coordinate produced");
        }
    }
    return out;
}

}  // namespace astra
