#pragma once

// Full forecasting pipeline. A Model owns every learnable tensor and wires
// the stages together: per-frame social graphs and their random-walk
// encodings, the spatial/temporal/social token streams, the scene and agent
// transformer encoders, per-agent condition vectors, and the prediction
// head for the configured mode (direct regression, or CVAE sampling).
//
// Windows must arrive centered; the model never sees absolute coordinates.
// All randomness is taken from explicit Rng arguments, so every output is a
// pure function of (config, init seed, inputs, noise seed).
//
// estimate_flops counts multiply-accumulates as two FLOPs each and covers
// linear maps, attention contractions, and token-mean reductions; softmax,
// normalization, activations, and elementwise arithmetic are excluded.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "astra/cvae.hpp"
#include "astra/data_io.hpp"
#include "astra/encoder.hpp"
#include "astra/encodings.hpp"
#include "astra/errors.hpp"
#include "astra/losses.hpp"
#include "astra/params.hpp"
#include "astra/rng.hpp"
#include "astra/scene_features.hpp"
#include "astra/social_graph.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct ModelConfig {
    PredictionMode mode = PredictionMode::deterministic;
    std::size_t t_obs = 8;
    std::size_t t_pred = 12;
    std::size_t coord_dim = 2;
    EmbeddingConfig embed;
    EncoderConfig encoder;
    std::size_t rwpe_k = 8;       // random-walk steps per social encoding row
    double eps_dist = 0.01;       // distance floor for edge weights
    std::size_t d_latent = 64;    // scene latent width fed to the projection
    std::size_t d_z = 32;
    std::size_t d_ytilde = 64;    // generation output width
    std::size_t d_future = 64;    // future-trajectory embedding width
    std::size_t mlp_hidden = 64;  // hidden width of every head MLP
    bool condition_on_c = true;   // generation sees (c, z) instead of z alone
    // Restrict agent-encoder attention to each agent's own frames instead of
    // the joint (agent, frame) token set.
    bool agent_attention_time_only = false;

    std::size_t condition_dim() const { return 2 * encoder.d_model; }

    void validate() const {
        embed.validate();
        encoder.validate();
        if (t_obs < 1 || t_pred < 1) {
            throw ConfigError("ModelConfig: t_obs and t_pred must be at least 1");
        }
        if (coord_dim != embed.coord_dim) {
            throw ConfigError("ModelConfig: coord_dim " + std::to_string(coord_dim) +
                              " disagrees with embedding coord_dim " +
                              std::to_string(embed.coord_dim));
        }
        if (embed.agent_token_dim() != encoder.d_model) {
            throw ConfigError("ModelConfig: agent token width " +
                              std::to_string(embed.agent_token_dim()) +
                              " does not match encoder width " +
                              std::to_string(encoder.d_model));
        }
        if (embed.scene_token_dim() != encoder.d_model) {
            throw ConfigError("ModelConfig: scene token width " +
                              std::to_string(embed.scene_token_dim()) +
                              " does not match encoder width " +
                              std::to_string(encoder.d_model));
        }
        if (rwpe_k < 1) {
            throw ConfigError("ModelConfig: rwpe_k must be at least 1");
        }
        if (!(eps_dist > 0.0)) {
            throw ConfigError("ModelConfig: eps_dist must be positive");
        }
        if (d_latent < 1 || d_z < 1 || d_ytilde < 1 || d_future < 1 || mlp_hidden < 1) {
            throw ConfigError("ModelConfig: head widths must be positive");
        }
    }
};

// Loss shape shared by both modes. The stochastic terms are ignored in
// deterministic mode.
struct LossConfig {
    PenaltySchedule schedule;
    BaseLossKind base = BaseLossKind::mse;
    std::size_t k_train = 5;  // draws per window, best-of-K
    double kl_coeff = 1.0;
    // Draw the K training samples from the prior instead of the posterior.
    // The KL term is unchanged; only the reconstruction samples move.
    bool sample_prior = false;

    void validate(std::size_t t_pred) const {
        schedule.validate();
        if (schedule.t_pred != t_pred) {
            throw ConfigError("LossConfig: penalty horizon " +
                              std::to_string(schedule.t_pred) + " does not match t_pred " +
                              std::to_string(t_pred));
        }
        if (k_train < 1) {
            throw ConfigError("LossConfig: k_train must be at least 1");
        }
        if (kl_coeff < 0.0) {
            throw ConfigError("LossConfig: kl_coeff must be nonnegative");
        }
    }
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(init_seed);
        const std::size_t d_c = cfg_.condition_dim();
        const std::size_t flat = cfg_.t_pred * cfg_.coord_dim;
        const auto gelu = Activation::gelu;
        const auto id = Activation::identity;

        spatial_net_ = make_mlp(params_, "embed.spatial",
                                {cfg_.coord_dim, cfg_.embed.d_spatial}, gelu, id, rng);
        social_net_ = make_mlp(params_, "embed.social", {cfg_.rwpe_k, cfg_.embed.d_social},
                               gelu, id, rng);
        scene_net_ = make_mlp(params_, "embed.scene", {cfg_.d_latent, cfg_.embed.d_scene},
                              gelu, id, rng);
        enc_scene_ = make_encoder_params(params_, "enc.scene", cfg_.encoder, rng);
        enc_agent_ = make_encoder_params(params_, "enc.agent", cfg_.encoder, rng);
        if (cfg_.mode == PredictionMode::deterministic) {
            det_decoder_ = make_mlp(params_, "head.det",
                                    {d_c, cfg_.mlp_hidden, flat}, gelu, id, rng);
        } else {
            prior_net_ = make_mlp(params_, "cvae.prior",
                                  {d_c, cfg_.mlp_hidden, 2 * cfg_.d_z}, gelu, id, rng);
            future_net_ = make_mlp(params_, "cvae.future",
                                   {flat, cfg_.mlp_hidden, cfg_.d_future}, gelu, id, rng);
            posterior_net_ = make_mlp(params_, "cvae.posterior",
                                      {d_c + cfg_.d_future, cfg_.mlp_hidden, 2 * cfg_.d_z},
                                      gelu, id, rng);
            const std::size_t gen_in = cfg_.condition_on_c ? d_c + cfg_.d_z : cfg_.d_z;
            generation_net_ = make_mlp(params_, "cvae.generation",
                                       {gen_in, cfg_.mlp_hidden, cfg_.d_ytilde}, gelu, id,
                                       rng);
            stoch_decoder_ = make_mlp(params_, "head.stoch",
                                      {cfg_.d_ytilde, cfg_.mlp_hidden, flat}, gelu, id, rng);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    // Runs the encoding half of the pipeline: [A x 2*d_model] conditions.
    Tensor encode(const TrajectoryWindow& w, const SceneLatentTable& latents) const {
        check_window(w);
        const std::size_t a_count = w.agents();
        const std::size_t t_obs = cfg_.t_obs;

        Tensor coords({a_count, t_obs, cfg_.coord_dim}, std::vector<double>(w.obs));
        Tensor spatial = embed_spatial(coords, spatial_net_);
        Tensor temporal = temporal_encoding_table(t_obs, cfg_.embed.d_temporal,
                                                  cfg_.embed.temporal_pair_index);
        Tensor social = social_stream(w);
        TokenSequence agent_seq = assemble_agent_tokens(spatial, temporal, social,
                                                        w.agent_ids);

        std::vector<double> latent_rows;
        latent_rows.reserve(t_obs * latents.dim());
        for (std::size_t t = 0; t < t_obs; ++t) {
            const auto& row = latents.at(w.frame_ids[t]);
            latent_rows.insert(latent_rows.end(), row.begin(), row.end());
        }
        Tensor scene_latents({t_obs, latents.dim()}, std::move(latent_rows));
        Tensor scene_proj = project_scene(scene_latents, scene_net_, t_obs);
        TokenSequence scene_seq = assemble_scene_tokens(scene_proj, temporal);

        Tensor scene_out = encoder_forward(scene_seq, cfg_.encoder, enc_scene_);
        Tensor agent_out = agent_encoding(agent_seq, a_count);
        return condition_vector(scene_out, agent_out, a_count);
    }

    // Per-agent [t_pred x coord_dim] trajectories regressed straight from
    // the condition vectors.
    std::vector<Tensor> decode_deterministic(const Tensor& condition,
                                             const TrajectoryWindow& w) const {
        if (cfg_.mode != PredictionMode::deterministic) {
            throw ContractError("decode_deterministic: model is stochastic");
        }
        return decode_displacements(condition, det_decoder_, last_obs(w), cfg_.t_pred,
                                    cfg_.coord_dim);
    }

    // Training objective for one window. Deterministic mode ignores the
    // noise and the stochastic loss terms.
    Tensor training_loss(const TrajectoryWindow& w, const SceneLatentTable& latents,
                         const LossConfig& loss, Rng noise_root) const {
        loss.validate(cfg_.t_pred);
        if (w.t_pred == 0) {
            throw ContractError("training_loss: window has no future frames");
        }
        Tensor condition = encode(w, latents);
        const std::size_t a_count = w.agents();

        if (cfg_.mode == PredictionMode::deterministic) {
            std::vector<Tensor> trajs = decode_deterministic(condition, w);
            std::vector<Tensor> per_agent;
            per_agent.reserve(a_count);
            for (std::size_t a = 0; a < a_count; ++a) {
                per_agent.push_back(weighted_loss(trajs[a], ground_truth(w, a),
                                                  loss.schedule, loss.base));
            }
            return agent_mean(per_agent);
        }

        GaussianParams posterior =
            posterior_params(condition, future_flat(w), future_net_, posterior_net_);
        GaussianParams prior = prior_params(condition, prior_net_);
        Tensor kl = scale(kl_divergence(posterior, prior),
                          1.0 / static_cast<double>(a_count));

        Tensor anchors = last_obs(w);
        const GaussianParams& sampled = loss.sample_prior ? prior : posterior;
        std::vector<std::vector<Tensor>> samples(a_count);
        for (std::size_t k = 0; k < loss.k_train; ++k) {
            Tensor z = reparameterize(sampled, posterior_noise(w, k, noise_root));
            Tensor latent = generate(condition, z, generation_net_, cfg_.condition_on_c);
            std::vector<Tensor> trajs = decode_displacements(latent, stoch_decoder_, anchors,
                                                             cfg_.t_pred, cfg_.coord_dim);
            for (std::size_t a = 0; a < a_count; ++a) {
                samples[a].push_back(std::move(trajs[a]));
            }
        }
        std::vector<Tensor> per_agent;
        per_agent.reserve(a_count);
        for (std::size_t a = 0; a < a_count; ++a) {
            per_agent.push_back(
                best_of_k_loss(samples[a], ground_truth(w, a), loss.schedule, loss.base)
                    .loss);
        }
        return final_loss(agent_mean(per_agent), kl, loss.kl_coeff);
    }

    // Forecasts for one window. Deterministic models produce exactly one
    // trajectory per agent; stochastic models draw k from the prior.
    PredictionSet predict(const TrajectoryWindow& w, const SceneLatentTable& latents,
                          std::size_t k, Rng noise_root) const {
        Tensor condition = encode(w, latents);
        if (cfg_.mode == PredictionMode::deterministic) {
            if (k != 1) {
                throw ContractError("predict: deterministic mode produces exactly one "
                                    "trajectory per agent, got k=" +
                                    std::to_string(k));
            }
            std::vector<Tensor> trajs = decode_deterministic(condition, w);
            PredictionSet set;
            set.mode = PredictionMode::deterministic;
            set.k = 1;
            set.t_pred = cfg_.t_pred;
            set.coord_dim = cfg_.coord_dim;
            set.agent_ids = w.agent_ids;
            set.trajectories.reserve(w.agents() * cfg_.t_pred * cfg_.coord_dim);
            for (const Tensor& traj : trajs) {
                const auto data = traj.data();
                set.trajectories.insert(set.trajectories.end(), data.begin(), data.end());
            }
            return set;
        }
        CvaeNets nets{prior_net_, generation_net_, stoch_decoder_, cfg_.condition_on_c};
        return sample_trajectories(condition, w.agent_ids, last_obs(w), k, noise_root, nets,
                                   cfg_.t_pred, cfg_.coord_dim);
    }

private:
    // t_pred 0 marks an observation-only window; encoding and prediction
    // accept it, training cannot.
    void check_window(const TrajectoryWindow& w) const {
        if (!w.centered) {
            throw ContractError("Model: window must be centered before encoding");
        }
        if (w.agents() == 0) {
            throw ShapeError("Model: window has no agents");
        }
        if (w.t_obs != cfg_.t_obs || (w.t_pred != cfg_.t_pred && w.t_pred != 0) ||
            w.coord_dim != cfg_.coord_dim) {
            throw ShapeError("Model: window is t_obs=" + std::to_string(w.t_obs) +
                             " t_pred=" + std::to_string(w.t_pred) + " coord_dim=" +
                             std::to_string(w.coord_dim) + ", model expects " +
                             std::to_string(cfg_.t_obs) + "/" + std::to_string(cfg_.t_pred) +
                             "/" + std::to_string(cfg_.coord_dim));
        }
    }

    // Embedded random-walk encodings, frame-major: [t_obs x A x d_social].
    Tensor social_stream(const TrajectoryWindow& w) const {
        const std::size_t a_count = w.agents();
        std::vector<double> rows;
        rows.reserve(cfg_.t_obs * a_count * cfg_.rwpe_k);
        std::vector<std::array<double, 2>> positions(a_count);
        for (std::size_t t = 0; t < cfg_.t_obs; ++t) {
            for (std::size_t a = 0; a < a_count; ++a) {
                positions[a] = w.obs_point(a, t);
            }
            SocialGraph g = build_social_graph(positions, cfg_.eps_dist);
            RwpeMatrix enc = rwpe(g, cfg_.rwpe_k);
            rows.insert(rows.end(), enc.values.begin(), enc.values.end());
        }
        Tensor flat({cfg_.t_obs * a_count, cfg_.rwpe_k}, std::move(rows));
        return reshape(embed_social(flat, social_net_),
                       {cfg_.t_obs, a_count, cfg_.embed.d_social});
    }

    Tensor agent_encoding(const TokenSequence& seq, std::size_t a_count) const {
        if (!cfg_.agent_attention_time_only) {
            return encoder_forward(seq, cfg_.encoder, enc_agent_);
        }
        // Each agent attends over its own frames only. Tokens are
        // frame-major, so agent a's track is rows {t*A + a}.
        std::vector<Tensor> tracks;
        tracks.reserve(a_count);
        for (std::size_t a = 0; a < a_count; ++a) {
            std::vector<std::size_t> idx(cfg_.t_obs);
            for (std::size_t t = 0; t < cfg_.t_obs; ++t) {
                idx[t] = t * a_count + a;
            }
            tracks.push_back(encoder_forward(gather_rows(seq.tokens, std::move(idx)),
                                             cfg_.encoder, enc_agent_));
        }
        Tensor stacked = concat_rows(std::span<const Tensor>(tracks));  // rows a*T + t
        std::vector<std::size_t> frame_major(a_count * cfg_.t_obs);
        for (std::size_t t = 0; t < cfg_.t_obs; ++t) {
            for (std::size_t a = 0; a < a_count; ++a) {
                frame_major[t * a_count + a] = a * cfg_.t_obs + t;
            }
        }
        return gather_rows(stacked, std::move(frame_major));
    }

    Tensor last_obs(const TrajectoryWindow& w) const {
        std::vector<double> anchors;
        anchors.reserve(w.agents() * cfg_.coord_dim);
        for (std::size_t a = 0; a < w.agents(); ++a) {
            const auto c = w.obs_at(a, cfg_.t_obs - 1);
            anchors.insert(anchors.end(), c.begin(), c.end());
        }
        return Tensor({w.agents(), cfg_.coord_dim}, std::move(anchors));
    }

    Tensor ground_truth(const TrajectoryWindow& w, std::size_t a) const {
        const std::size_t flat = cfg_.t_pred * cfg_.coord_dim;
        std::vector<double> gt(w.future.begin() + static_cast<std::ptrdiff_t>(a * flat),
                               w.future.begin() + static_cast<std::ptrdiff_t>((a + 1) * flat));
        return Tensor({cfg_.t_pred, cfg_.coord_dim}, std::move(gt));
    }

    Tensor future_flat(const TrajectoryWindow& w) const {
        return Tensor({w.agents(), cfg_.t_pred * cfg_.coord_dim},
                      std::vector<double>(w.future));
    }

    // Noise rows are forked per (agent id, draw index), so each agent's
    // stream survives any reordering of the window.
    Tensor posterior_noise(const TrajectoryWindow& w, std::size_t draw,
                           Rng noise_root) const {
        std::vector<double> noise;
        noise.reserve(w.agents() * cfg_.d_z);
        for (std::int64_t id : w.agent_ids) {
            Rng rng = noise_root.fork(static_cast<std::uint64_t>(id),
                                      static_cast<std::uint64_t>(draw));
            for (std::size_t i = 0; i < cfg_.d_z; ++i) {
                noise.push_back(rng.normal());
            }
        }
        return Tensor({w.agents(), cfg_.d_z}, std::move(noise));
    }

    // Mean of per-agent scalar losses, summed in sorted order so the value
    // is identical under any agent permutation.
    static Tensor agent_mean(const std::vector<Tensor>& per_agent) {
        Tensor stacked = stack_scalars(std::span<const Tensor>(per_agent));
        return scale(sum_stable(stacked), 1.0 / static_cast<double>(per_agent.size()));
    }

    ModelConfig cfg_;
    ModelParams params_;
    std::vector<DenseLayer> spatial_net_;
    std::vector<DenseLayer> social_net_;
    std::vector<DenseLayer> scene_net_;
    EncoderParams enc_scene_;
    EncoderParams enc_agent_;
    std::vector<DenseLayer> det_decoder_;
    std::vector<DenseLayer> prior_net_;
    std::vector<DenseLayer> future_net_;
    std::vector<DenseLayer> posterior_net_;
    std::vector<DenseLayer> generation_net_;
    std::vector<DenseLayer> stoch_decoder_;
};

inline std::size_t count_parameters(const Model& m) { return m.params().scalar_count(); }

namespace detail {

inline std::uint64_t linear_flops(std::size_t rows, std::size_t in, std::size_t out) {
    return 2ull * rows * in * out;
}

inline std::uint64_t mlp_flops(std::size_t rows, std::span<const DenseLayer> layers) {
    std::uint64_t total = 0;
    for (const DenseLayer& l : layers) {
        total += linear_flops(rows, l.weight.dim(0), l.weight.dim(1));
    }
    return total;
}

// One pre-norm block on n tokens: Q/K/V/O projections, the two attention
// contractions (scores and value mixing, 2*n^2*d each), and the FFN.
inline std::uint64_t encoder_flops(std::size_t n, const EncoderConfig& cfg) {
    const std::size_t d = cfg.d_model;
    std::uint64_t total = 4 * linear_flops(n, d, d);
    total += 2ull * (2ull * n * n * d);
    total += linear_flops(n, d, cfg.d_ffn) + linear_flops(n, cfg.d_ffn, d);
    return total;
}

}  // namespace detail

// Forward-pass cost estimate for one window with a_count agents and k
// forecast samples. See the accounting convention in the header comment.
inline std::uint64_t estimate_flops(const Model& m, std::size_t a_count, std::size_t k = 1) {
    if (a_count < 1 || k < 1) {
        throw ContractError("estimate_flops: a_count and k must be at least 1");
    }
    const ModelConfig& cfg = m.config();
    const std::size_t t = cfg.t_obs;
    const std::size_t d = cfg.encoder.d_model;
    const std::size_t d_c = cfg.condition_dim();
    const std::size_t flat = cfg.t_pred * cfg.coord_dim;
    const std::size_t hidden = cfg.mlp_hidden;

    std::uint64_t total = 0;
    total += detail::linear_flops(a_count * t, cfg.coord_dim, cfg.embed.d_spatial);
    total += detail::linear_flops(a_count * t, cfg.rwpe_k, cfg.embed.d_social);
    total += detail::linear_flops(t, cfg.d_latent, cfg.embed.d_scene);
    total += detail::encoder_flops(t, cfg.encoder);
    if (cfg.agent_attention_time_only) {
        total += a_count * detail::encoder_flops(t, cfg.encoder);
    } else {
        total += detail::encoder_flops(a_count * t, cfg.encoder);
    }
    // Token means inside the condition vector: one scene mean, one per agent.
    total += (a_count + 1) * detail::linear_flops(1, t, d);

    if (cfg.mode == PredictionMode::deterministic) {
        total += detail::linear_flops(a_count, d_c, hidden);
        total += detail::linear_flops(a_count, hidden, flat);
        return total;
    }
    total += detail::linear_flops(a_count, d_c, hidden);
    total += detail::linear_flops(a_count, hidden, 2 * cfg.d_z);
    const std::size_t gen_in = cfg.condition_on_c ? d_c + cfg.d_z : cfg.d_z;
    std::uint64_t per_sample = detail::linear_flops(a_count, gen_in, hidden) +
                               detail::linear_flops(a_count, hidden, cfg.d_ytilde) +
                               detail::linear_flops(a_count, cfg.d_ytilde, hidden) +
                               detail::linear_flops(a_count, hidden, flat);
    total += k * per_sample;
    return total;
}

}  // namespace astra
