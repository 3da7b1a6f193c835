#pragma once

// Token assembly by concatenation and the two single-layer pre-norm
// transformer encoders (scene-aware over T_obs frame tokens, agent-aware
// over A*T_obs (agent, frame) tokens). Attention is full and unmasked; all
// order information lives in token content, so the encoders are exactly
// permutation-equivariant in token order. The softmax denominators and the
// attention-apply product accumulate in sorted order, making that
// equivariance bit-exact.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/params.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct EncoderConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ffn = 128;
    double ln_eps = 1e-5;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_ffn == 0) {
            throw ConfigError("EncoderConfig: dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("EncoderConfig: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (!(ln_eps > 0.0)) {
            throw ConfigError("EncoderConfig: ln_eps must be positive");
        }
    }
};

struct EncoderParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gain, ln1_shift, ln2_gain, ln2_shift;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

inline EncoderParams make_encoder_params(ModelParams& params, const std::string& prefix,
                                         const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    EncoderParams p;
    auto proj = [&](const char* name, Tensor& w, Tensor& b) {
        w = params.add(prefix + ".attn." + name + ".weight", {d, d});
        b = params.add(prefix + ".attn." + name + ".bias", {d});
        init_uniform_fan(w, d, d, rng);
    };
    proj("q", p.wq, p.bq);
    proj("k", p.wk, p.bk);
    proj("v", p.wv, p.bv);
    proj("out", p.wo, p.bo);
    p.ln1_gain = params.add(prefix + ".ln1.gain", {d});
    p.ln1_shift = params.add(prefix + ".ln1.shift", {d});
    p.ln2_gain = params.add(prefix + ".ln2.gain", {d});
    p.ln2_shift = params.add(prefix + ".ln2.shift", {d});
    for (auto* gain : {&p.ln1_gain, &p.ln2_gain}) {
        for (auto& v : gain->mutable_data()) {
            v = 1.0;
        }
    }
    p.ffn_w1 = params.add(prefix + ".ffn.0.weight", {d, cfg.d_ffn});
    p.ffn_b1 = params.add(prefix + ".ffn.0.bias", {cfg.d_ffn});
    p.ffn_w2 = params.add(prefix + ".ffn.1.weight", {cfg.d_ffn, d});
    p.ffn_b2 = params.add(prefix + ".ffn.1.bias", {d});
    init_uniform_fan(p.ffn_w1, d, cfg.d_ffn, rng);
    init_uniform_fan(p.ffn_w2, cfg.d_ffn, d, rng);
    return p;
}

struct TokenProvenance {
    std::int64_t agent_id = -1;  // -1 marks scene tokens
    std::size_t frame = 0;       // observed-frame index within the window
};

struct TokenSequence {
    Tensor tokens;  // [N x d_model]
    std::vector<TokenProvenance> provenance;
};

// Agent tokens ordered frame-major: token(t*A + a) =
// concat(spatial[a][t], temporal[t], social[t][a]).
inline TokenSequence assemble_agent_tokens(const Tensor& spatial, const Tensor& temporal,
                                           const Tensor& social,
                                           const std::vector<std::int64_t>& agent_ids = {}) {
    detail::require_rank(spatial, 3, "assemble_agent_tokens(spatial)");
    detail::require_rank(temporal, 2, "assemble_agent_tokens(temporal)");
    detail::require_rank(social, 3, "assemble_agent_tokens(social)");
    const std::size_t a_count = spatial.dim(0);
    const std::size_t t_obs = spatial.dim(1);
    if (temporal.dim(0) != t_obs) {
        throw ShapeError("assemble_agent_tokens: temporal stream has " +
                         std::to_string(temporal.dim(0)) + " frames, spatial stream has " +
                         std::to_string(t_obs));
    }
    if (social.dim(0) != t_obs || social.dim(1) != a_count) {
        throw ShapeError("assemble_agent_tokens: social stream is " +
                         detail::shape_str(social.shape()) + ", expected [" +
                         std::to_string(t_obs) + " x " + std::to_string(a_count) + " x k]");
    }
    if (!agent_ids.empty() && agent_ids.size() != a_count) {
        throw ShapeError("assemble_agent_tokens: " + std::to_string(agent_ids.size()) +
                         " agent ids for " + std::to_string(a_count) + " agents");
    }

    const std::size_t n = a_count * t_obs;
    std::vector<std::size_t> spatial_idx(n);  // token t*A+a <- flat row a*T+t
    std::vector<std::size_t> temporal_idx(n);
    for (std::size_t t = 0; t < t_obs; ++t) {
        for (std::size_t a = 0; a < a_count; ++a) {
            spatial_idx[t * a_count + a] = a * t_obs + t;
            temporal_idx[t * a_count + a] = t;
        }
    }
    Tensor spatial_rows =
        gather_rows(reshape(spatial, {n, spatial.dim(2)}), std::move(spatial_idx));
    Tensor temporal_rows = gather_rows(temporal, std::move(temporal_idx));
    Tensor social_rows = reshape(social, {n, social.dim(2)});  // already frame-major

    TokenSequence seq;
    seq.tokens = concat_cols({spatial_rows, temporal_rows, social_rows});
    seq.provenance.resize(n);
    for (std::size_t t = 0; t < t_obs; ++t) {
        for (std::size_t a = 0; a < a_count; ++a) {
            seq.provenance[t * a_count + a] = {
                agent_ids.empty() ? static_cast<std::int64_t>(a) : agent_ids[a], t};
        }
    }
    return seq;
}

// Scene tokens, one per observed frame: token(t) = concat(scene_proj[t], temporal[t]).
inline TokenSequence assemble_scene_tokens(const Tensor& scene_proj, const Tensor& temporal) {
    detail::require_rank(scene_proj, 2, "assemble_scene_tokens(scene)");
    detail::require_rank(temporal, 2, "assemble_scene_tokens(temporal)");
    if (scene_proj.dim(0) != temporal.dim(0)) {
        throw ShapeError("assemble_scene_tokens: " + std::to_string(scene_proj.dim(0)) +
                         " scene frames vs " + std::to_string(temporal.dim(0)) +
                         " temporal frames");
    }
    TokenSequence seq;
    seq.tokens = concat_cols({scene_proj, temporal});
    seq.provenance.resize(scene_proj.dim(0));
    for (std::size_t t = 0; t < seq.provenance.size(); ++t) {
        seq.provenance[t] = {-1, t};
    }
    return seq;
}

// One pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)). Optionally
// exposes the per-head attention weights for inspection.
inline Tensor encoder_forward(const Tensor& tokens, const EncoderConfig& cfg,
                              const EncoderParams& params,
                              std::vector<Tensor>* attention_out = nullptr) {
    cfg.validate();
    detail::require_rank(tokens, 2, "encoder_forward");
    if (tokens.dim(1) != cfg.d_model) {
        throw ShapeError("encoder_forward: token width " + std::to_string(tokens.dim(1)) +
                         " does not match d_model " + std::to_string(cfg.d_model));
    }
    const std::size_t d_head = cfg.d_model / cfg.n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d_head));

    Tensor h = layer_norm(tokens, params.ln1_gain, params.ln1_shift, cfg.ln_eps);
    Tensor q = bias_add(matmul(h, params.wq), params.bq);
    Tensor k = bias_add(matmul(h, params.wk), params.bk);
    Tensor v = bias_add(matmul(h, params.wv), params.bv);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(cfg.n_heads);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
        Tensor qh = slice_cols(q, head * d_head, d_head);
        Tensor kh = slice_cols(k, head * d_head, d_head);
        Tensor vh = slice_cols(v, head * d_head, d_head);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor attn = softmax_last_dim(scores);
        if (attention_out) {
            attention_out->push_back(attn);
        }
        head_outputs.push_back(matmul_stable(attn, vh));
    }
    Tensor mixed = concat_cols(std::span<const Tensor>(head_outputs));
    Tensor attended = add(tokens, bias_add(matmul(mixed, params.wo), params.bo));

    Tensor h2 = layer_norm(attended, params.ln2_gain, params.ln2_shift, cfg.ln_eps);
    Tensor f = bias_add(matmul(h2, params.ffn_w1), params.ffn_b1);
    f = gelu(f);
    f = bias_add(matmul(f, params.ffn_w2), params.ffn_b2);
    return add(attended, f);
}

inline Tensor encoder_forward(const TokenSequence& seq, const EncoderConfig& cfg,
                              const EncoderParams& params,
                              std::vector<Tensor>* attention_out = nullptr) {
    return encoder_forward(seq.tokens, cfg, params, attention_out);
}

}  // namespace astra
