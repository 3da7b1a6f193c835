#pragma once

// The four embedding streams feeding the encoders: sinusoidal temporal
// encoding, spatial MLP over centered coordinates, social MLP over RWPE
// rows, and the framewise scene-latent projection.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct EmbeddingConfig {
    std::size_t d_temporal = 16;
    std::size_t d_spatial = 32;
    std::size_t d_social = 16;
    std::size_t d_scene = 48;
    std::size_t coord_dim = 2;  // 2 = ground-plane points, 4 = bbox corners
    // Interpret the frequency exponent index pairwise (sin/cos pairs share a
    // frequency, original transformer style) instead of literally per
    // component. Off by default.
    bool temporal_pair_index = false;

    std::size_t agent_token_dim() const { return d_spatial + d_temporal + d_social; }
    std::size_t scene_token_dim() const { return d_scene + d_temporal; }

    void validate() const {
        if (d_temporal < 2 || d_spatial < 2 || d_social < 2 || d_scene < 2) {
            throw ConfigError("EmbeddingConfig: all embedding dims must be at least 2");
        }
        if (d_temporal % 2 != 0) {
            throw ConfigError("EmbeddingConfig: d_temporal must be even, got " +
                              std::to_string(d_temporal));
        }
        if (coord_dim != 2 && coord_dim != 4) {
            throw ConfigError("EmbeddingConfig: coord_dim must be 2 or 4, got " +
                              std::to_string(coord_dim));
        }
    }
};

// Sinusoidal encoding of a frame index. Component i uses frequency
// 1/10000^(2i/d) with sin on even i and cos on odd i; the exponent index is
// the literal component index unless pair_index selects the paired variant.
inline std::vector<double> temporal_encoding(std::size_t t, std::size_t d,
                                             bool pair_index = false) {
    if (d < 1) {
        throw ContractError("temporal_encoding: d must be at least 1");
    }
    std::vector<double> enc(d);
    for (std::size_t i = 0; i < d; ++i) {
        const std::size_t freq_index = pair_index ? i / 2 : i;
        const double angle =
            static_cast<double>(t) /
            std::pow(10000.0, 2.0 * static_cast<double>(freq_index) / static_cast<double>(d));
        enc[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return enc;
}

// Rows t = 0..frames-1 stacked into a constant [frames x d] tensor.
inline Tensor temporal_encoding_table(std::size_t frames, std::size_t d,
                                      bool pair_index = false) {
    if (frames < 1) {
        throw ContractError("temporal_encoding_table: at least one frame");
    }
    std::vector<double> data;
    data.reserve(frames * d);
    for (std::size_t t = 0; t < frames; ++t) {
        const auto row = temporal_encoding(t, d, pair_index);
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({frames, d}, std::move(data));
}

// Tokenwise coordinate embedding: [A x T_obs x coord_dim] -> [A x T_obs x d_spatial].
inline Tensor embed_spatial(const Tensor& coords, std::span<const DenseLayer> params) {
    if (coords.shape().back() != params.front().weight.dim(0)) {
        throw ShapeError("embed_spatial: coordinate width " +
                         std::to_string(coords.shape().back()) + " does not match input dim " +
                         std::to_string(params.front().weight.dim(0)));
    }
    return mlp_forward(coords, params);
}

// Tokenwise RWPE embedding: [A x k] -> [A x d_social].
inline Tensor embed_social(const Tensor& rwpe_rows, std::span<const DenseLayer> params) {
    if (rwpe_rows.shape().back() != params.front().weight.dim(0)) {
        throw ShapeError("embed_social: encoding width " +
                         std::to_string(rwpe_rows.shape().back()) +
                         " does not match input dim " +
                         std::to_string(params.front().weight.dim(0)));
    }
    return mlp_forward(rwpe_rows, params);
}

// Framewise scene-latent projection: [T_obs x d_latent] -> [T_obs x d_scene].
inline Tensor project_scene(const Tensor& latents, std::span<const DenseLayer> params,
                            std::size_t t_obs) {
    detail::require_rank(latents, 2, "project_scene");
    if (latents.dim(0) != t_obs) {
        throw ShapeError("project_scene: " + std::to_string(latents.dim(0)) +
                         " latent rows for " + std::to_string(t_obs) + " observed frames");
    }
    if (latents.dim(1) != params.front().weight.dim(0)) {
        throw ShapeError("project_scene: latent width " + std::to_string(latents.dim(1)) +
                         " does not match input dim " +
                         std::to_string(params.front().weight.dim(0)));
    }
    return mlp_forward(latents, params);
}

}  // namespace astra
