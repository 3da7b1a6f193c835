#pragma once

// Named finite-difference sweeps over every differentiable tensor operation,
// the encoding/encoder/CVAE/loss compositions built from them, and the full
// training objective of each prediction mode on a two-agent toy window
// (t_obs 4, t_pred 6). Inputs are fixed and seeded, sampled away from the
// kink loci of relu/clamp/smooth_l1 so central differences stay valid, and
// the objective checks probe every parameter coordinate. Backs the
// `gradcheck` CLI subcommand and the gradient acceptance gate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "astra/cvae.hpp"
#include "astra/data_io.hpp"
#include "astra/encoder.hpp"
#include "astra/encodings.hpp"
#include "astra/errors.hpp"
#include "astra/gradcheck.hpp"
#include "astra/losses.hpp"
#include "astra/model.hpp"
#include "astra/params.hpp"
#include "astra/rng.hpp"
#include "astra/scene_features.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct SuiteCheck {
    std::string module;
    std::string name;
    GradCheckResult result;
};

inline const std::vector<std::string>& gradcheck_modules() {
    static const std::vector<std::string> modules{"tensor", "encodings", "encoder",
                                                  "cvae",   "losses",    "objective"};
    return modules;
}

namespace detail {

// Values in [-2, 2], resampled until every entry sits at least `margin`
// away from each kink locus.
inline std::vector<double> suite_values(Rng& rng, std::size_t n,
                                        std::initializer_list<double> kinks = {},
                                        double margin = 0.05) {
    std::vector<double> v(n);
    for (auto& x : v) {
        do {
            x = rng.uniform(-2.0, 2.0);
            bool near = false;
            for (double k : kinks) {
                near = near || std::abs(x - k) < margin;
            }
            if (!near) {
                break;
            }
        } while (true);
    }
    return v;
}

inline Tensor suite_leaf(Rng& rng, std::vector<std::size_t> shape,
                         std::initializer_list<double> kinks = {}) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return Tensor(std::move(shape), suite_values(rng, n, kinks), true);
}

// Fixed probe weights; contracting an op output against them gives every
// output coordinate a distinct path to the objective.
inline Tensor suite_probe(Rng& rng, const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return Tensor(shape, suite_values(rng, n));
}

inline std::vector<Tensor> net_leaves(std::span<const DenseLayer> net) {
    std::vector<Tensor> leaves;
    for (const auto& layer : net) {
        leaves.push_back(layer.weight);
        leaves.push_back(layer.bias);
    }
    return leaves;
}

// Dense stack with leaf weights, gelu hidden layers, identity output.
inline std::vector<DenseLayer> suite_net(Rng& rng, std::initializer_list<std::size_t> widths) {
    std::vector<std::size_t> w(widths);
    std::vector<DenseLayer> net;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(w[l]));
        std::vector<double> wan(w[l] * w[l + 1]);
        for (auto& v : wan) {
            v = rng.uniform(-bound, bound);
        }
        DenseLayer layer{Tensor({w[l], w[l + 1]}, std::move(wan), true),
                         Tensor::zeros({w[l + 1]}, true),
                         l + 2 == w.size() ? Activation::identity : Activation::gelu};
        net.push_back(std::move(layer));
    }
    return net;
}

// Two agents on crossing constant-velocity tracks with a seeded wobble,
// centered the way the pipeline expects.
inline TrajectoryWindow suite_window(std::size_t t_obs, std::size_t t_pred, Rng& rng) {
    TrajectoryWindow w;
    w.t_obs = t_obs;
    w.t_pred = t_pred;
    w.coord_dim = 2;
    w.agent_ids = {3, 5};
    const std::size_t frames = t_obs + t_pred;
    for (std::size_t t = 0; t < frames; ++t) {
        w.frame_ids.push_back(static_cast<std::int64_t>(t));
    }
    const double starts[2][2] = {{0.0, 0.0}, {2.0, 1.0}};
    const double vels[2][2] = {{0.3, 0.2}, {-0.25, 0.1}};
    for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t c = 0; c < 2; ++c) {
                const double v = starts[a][c] + vels[a][c] * static_cast<double>(t) +
                                 0.05 * rng.uniform(-1.0, 1.0);
                (t < t_obs ? w.obs : w.future).push_back(v);
            }
        }
    }
    return center_window(std::move(w));
}

inline SceneLatentTable suite_latents(const TrajectoryWindow& w, std::size_t dim, Rng& rng) {
    SceneLatentTable table(dim);
    for (std::size_t t = 0; t < w.t_obs; ++t) {
        std::vector<double> values(dim);
        for (auto& v : values) {
            v = rng.uniform(-1.0, 1.0);
        }
        table.insert(w.frame_ids[t], std::move(values));
    }
    return table;
}

// Smallest legal pipeline: d_model 8 splits into 4+2+2 agent and 6+2 scene
// token widths.
inline ModelConfig suite_model_config(PredictionMode mode) {
    ModelConfig cfg;
    cfg.mode = mode;
    cfg.t_obs = 4;
    cfg.t_pred = 6;
    cfg.coord_dim = 2;
    cfg.embed.d_spatial = 4;
    cfg.embed.d_temporal = 2;
    cfg.embed.d_social = 2;
    cfg.embed.d_scene = 6;
    cfg.embed.coord_dim = 2;
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ffn = 8;
    cfg.rwpe_k = 2;
    cfg.d_latent = 3;
    cfg.d_z = 2;
    cfg.d_ytilde = 4;
    cfg.d_future = 4;
    cfg.mlp_hidden = 4;
    return cfg;
}

inline LossConfig suite_loss_config() {
    LossConfig loss;
    loss.schedule = PenaltySchedule{PenaltyKind::parabolic, 2.0, 1.0, 6};
    loss.base = BaseLossKind::mse;
    loss.k_train = 2;
    loss.kl_coeff = 0.7;
    return loss;
}

}  // namespace detail

// Runs the named checks for one module ("all" for every module) and returns
// one entry per check. Results carry the worst relative error; callers
// decide the tolerance via GradCheckResult::pass.
inline std::vector<SuiteCheck> run_gradcheck_suite(const std::string& module = "all") {
    const bool all = module == "all";
    if (!all) {
        const auto& mods = gradcheck_modules();
        if (std::find(mods.begin(), mods.end(), module) == mods.end()) {
            std::string known = "all";
            for (const auto& m : mods) {
                known += ", " + m;
            }
            throw ConfigError("gradcheck: unknown module '" + module + "' (expected one of " +
                              known + ")");
        }
    }

    std::vector<SuiteCheck> checks;
    auto record = [&](const char* mod, const char* name, std::vector<Tensor> leaves,
                      const std::function<Tensor()>& f) {
        checks.push_back({mod, name, gradient_check(f, leaves)});
    };

    if (all || module == "tensor") {
        Rng rng(101);
        auto unary = [&](const char* name, const std::function<Tensor(const Tensor&)>& op,
                         std::initializer_list<double> kinks = {},
                         std::vector<std::size_t> shape = {3, 4}) {
            Tensor x = detail::suite_leaf(rng, std::move(shape), kinks);
            Tensor p = detail::suite_probe(rng, op(x).shape());
            record("tensor", name, {x}, [=] { return sum(mul(op(x), p)); });
        };
        auto binary = [&](const char* name,
                          const std::function<Tensor(const Tensor&, const Tensor&)>& op,
                          std::vector<std::size_t> sa, std::vector<std::size_t> sb) {
            Tensor a = detail::suite_leaf(rng, std::move(sa));
            Tensor b = detail::suite_leaf(rng, std::move(sb));
            Tensor p = detail::suite_probe(rng, op(a, b).shape());
            record("tensor", name, {a, b}, [=] { return sum(mul(op(a, b), p)); });
        };

        binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 4},
               {3, 4});
        binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {3, 4},
               {3, 4});
        binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {3, 4},
               {3, 4});
        unary("scale", [](const Tensor& t) { return scale(t, -0.7); });
        unary("neg", [](const Tensor& t) { return neg(t); });
        unary("add_scalar", [](const Tensor& t) { return add_scalar(t, 0.3); });
        unary("relu", [](const Tensor& t) { return relu(t); }, {0.0});
        unary("gelu", [](const Tensor& t) { return gelu(t); });
        unary("exp", [](const Tensor& t) { return exp(t); });
        unary("clamp", [](const Tensor& t) { return clamp(t, -1.0, 1.0); }, {-1.0, 1.0});
        unary("smooth_l1", [](const Tensor& t) { return smooth_l1(t); }, {-1.0, 1.0});
        binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {3, 4},
               {4, 2});
        binary("matmul_stable",
               [](const Tensor& a, const Tensor& b) { return matmul_stable(a, b); }, {3, 4},
               {4, 2});
        unary("transpose", [](const Tensor& t) { return transpose(t); });
        binary("bias_add", [](const Tensor& a, const Tensor& b) { return bias_add(a, b); },
               {3, 4}, {4});
        unary("softmax_last_dim", [](const Tensor& t) { return softmax_last_dim(t); }, {},
              {3, 5});
        {
            Tensor x = detail::suite_leaf(rng, {3, 6});
            Tensor gamma = detail::suite_leaf(rng, {6});
            Tensor beta = detail::suite_leaf(rng, {6});
            Tensor p = detail::suite_probe(rng, x.shape());
            record("tensor", "layer_norm", {x, gamma, beta},
                   [=] { return sum(mul(layer_norm(x, gamma, beta, 1e-5), p)); });
        }
        unary("sum", [](const Tensor& t) { return sum(t); });
        unary("sum_stable", [](const Tensor& t) { return sum_stable(t); });
        unary("mean", [](const Tensor& t) { return mean(t); });
        unary("reshape", [](const Tensor& t) { return reshape(t, {2, 6}); });
        binary("concat_cols",
               [](const Tensor& a, const Tensor& b) { return concat_cols({a, b}); }, {3, 2},
               {3, 3});
        binary("concat_rows",
               [](const Tensor& a, const Tensor& b) { return concat_rows({a, b}); }, {2, 4},
               {3, 4});
        unary("slice_cols", [](const Tensor& t) { return slice_cols(t, 1, 3); }, {}, {3, 6});
        // A repeated index exercises gradient accumulation into one row.
        unary("gather_rows", [](const Tensor& t) { return gather_rows(t, {2, 0, 4, 2}); }, {},
              {5, 3});
        unary("cumsum_rows", [](const Tensor& t) { return cumsum_rows(t); }, {}, {4, 3});
        {
            Tensor a = detail::suite_leaf(rng, {1});
            Tensor b = detail::suite_leaf(rng, {1});
            Tensor c = detail::suite_leaf(rng, {1});
            Tensor p = detail::suite_probe(rng, {3});
            record("tensor", "stack_scalars", {a, b, c}, [=] {
                std::vector<Tensor> scalars{a, b, c};
                return sum(mul(stack_scalars(std::span<const Tensor>(scalars)), p));
            });
        }
        unary("apply_activation",
              [](const Tensor& t) { return apply_activation(t, Activation::gelu); });
        {
            Tensor x = detail::suite_leaf(rng, {3, 4});
            auto net = detail::suite_net(rng, {4, 5, 2});
            Tensor p = detail::suite_probe(rng, {3, 2});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(x);
            record("tensor", "mlp_forward", std::move(leaves), [=] {
                return sum(mul(mlp_forward(x, std::span<const DenseLayer>(net)), p));
            });
        }
    }

    if (all || module == "encodings") {
        Rng rng(202);
        {
            Tensor coords = detail::suite_leaf(rng, {6, 2});
            auto net = detail::suite_net(rng, {2, 4});
            Tensor p = detail::suite_probe(rng, {6, 4});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(coords);
            record("encodings", "embed_spatial", std::move(leaves), [=] {
                return sum(mul(embed_spatial(coords, std::span<const DenseLayer>(net)), p));
            });
        }
        {
            Tensor rows = detail::suite_leaf(rng, {5, 3});
            auto net = detail::suite_net(rng, {3, 4});
            Tensor p = detail::suite_probe(rng, {5, 4});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(rows);
            record("encodings", "embed_social", std::move(leaves), [=] {
                return sum(mul(embed_social(rows, std::span<const DenseLayer>(net)), p));
            });
        }
        {
            Tensor latents = detail::suite_leaf(rng, {4, 3});
            auto net = detail::suite_net(rng, {3, 5});
            Tensor p = detail::suite_probe(rng, {4, 5});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(latents);
            record("encodings", "project_scene", std::move(leaves), [=] {
                return sum(
                    mul(project_scene(latents, std::span<const DenseLayer>(net), 4), p));
            });
        }
        {
            Tensor scene = detail::suite_leaf(rng, {4, 6});
            Tensor agents = detail::suite_leaf(rng, {8, 6});  // 2 agents x 4 frames
            Tensor p = detail::suite_probe(rng, {2, 12});
            record("encodings", "condition_vector", {scene, agents},
                   [=] { return sum(mul(condition_vector(scene, agents, 2), p)); });
        }
    }

    if (all || module == "encoder") {
        Rng rng(303);
        {
            Tensor spatial = detail::suite_leaf(rng, {2, 3, 4});
            Tensor temporal = detail::suite_leaf(rng, {3, 2});
            Tensor social = detail::suite_leaf(rng, {3, 2, 2});
            Tensor p = detail::suite_probe(rng, {6, 8});
            record("encoder", "assemble_agent_tokens", {spatial, temporal, social}, [=] {
                return sum(mul(assemble_agent_tokens(spatial, temporal, social).tokens, p));
            });
        }
        {
            Tensor scene = detail::suite_leaf(rng, {3, 6});
            Tensor temporal = detail::suite_leaf(rng, {3, 2});
            Tensor p = detail::suite_probe(rng, {3, 8});
            record("encoder", "assemble_scene_tokens", {scene, temporal},
                   [=] { return sum(mul(assemble_scene_tokens(scene, temporal).tokens, p)); });
        }
        {
            EncoderConfig cfg{8, 2, 8, 1e-5};
            ModelParams params;
            Rng init = rng.fork(1);
            EncoderParams enc = make_encoder_params(params, "enc", cfg, init);
            Tensor tokens = detail::suite_leaf(rng, {5, 8});
            Tensor p = detail::suite_probe(rng, {5, 8});
            std::vector<Tensor> leaves{tokens};
            for (auto& [name, tensor] : params.entries()) {
                leaves.push_back(tensor);
            }
            record("encoder", "encoder_forward", std::move(leaves),
                   [=] { return sum(mul(encoder_forward(tokens, cfg, enc), p)); });
        }
    }

    if (all || module == "cvae") {
        Rng rng(404);
        {
            Tensor q_head = detail::suite_leaf(rng, {2, 6});
            Tensor p_head = detail::suite_leaf(rng, {2, 6});
            record("cvae", "gaussian_head_kl", {q_head, p_head}, [=] {
                return kl_divergence(gaussian_head(q_head), gaussian_head(p_head));
            });
        }
        {
            Tensor mu = detail::suite_leaf(rng, {2, 3});
            Tensor logvar = detail::suite_leaf(rng, {2, 3});
            Tensor noise = detail::suite_probe(rng, {2, 3});
            Tensor p = detail::suite_probe(rng, {2, 3});
            record("cvae", "reparameterize", {mu, logvar}, [=] {
                return sum(mul(reparameterize(GaussianParams{mu, logvar}, noise), p));
            });
        }
        {
            Tensor condition = detail::suite_leaf(rng, {2, 5});
            Tensor z = detail::suite_leaf(rng, {2, 3});
            auto net = detail::suite_net(rng, {8, 4, 6});
            Tensor p = detail::suite_probe(rng, {2, 6});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(condition);
            leaves.push_back(z);
            record("cvae", "generate", std::move(leaves), [=] {
                return sum(
                    mul(generate(condition, z, std::span<const DenseLayer>(net), true), p));
            });
        }
        {
            Tensor input = detail::suite_leaf(rng, {2, 4});
            Tensor last_obs = detail::suite_leaf(rng, {2, 2});
            auto net = detail::suite_net(rng, {4, 4, 6});  // t_pred 3, coord_dim 2
            Tensor p = detail::suite_probe(rng, {6, 2});
            std::vector<Tensor> leaves = detail::net_leaves(net);
            leaves.push_back(input);
            leaves.push_back(last_obs);
            record("cvae", "decode_displacements", std::move(leaves), [=] {
                auto trajs = decode_displacements(input, std::span<const DenseLayer>(net),
                                                  last_obs, 3, 2);
                return sum(mul(concat_rows(std::span<const Tensor>(trajs)), p));
            });
        }
        {
            Tensor condition = detail::suite_leaf(rng, {2, 6});
            Tensor future = detail::suite_leaf(rng, {2, 4});
            auto prior_net = detail::suite_net(rng, {6, 4, 4});
            auto future_net = detail::suite_net(rng, {4, 3, 4});
            auto posterior_net = detail::suite_net(rng, {10, 4, 4});
            std::vector<Tensor> leaves{condition, future};
            for (const auto* net : {&prior_net, &future_net, &posterior_net}) {
                for (Tensor t : detail::net_leaves(*net)) {
                    leaves.push_back(t);
                }
            }
            record("cvae", "posterior_prior_kl", std::move(leaves), [=] {
                GaussianParams q =
                    posterior_params(condition, future, std::span<const DenseLayer>(future_net),
                                     std::span<const DenseLayer>(posterior_net));
                GaussianParams pr =
                    prior_params(condition, std::span<const DenseLayer>(prior_net));
                return kl_divergence(q, pr);
            });
        }
    }

    if (all || module == "losses") {
        Rng rng(505);
        const PenaltySchedule schedule{PenaltyKind::parabolic, 2.0, 1.0, 6};
        {
            Tensor pred = detail::suite_leaf(rng, {6, 2});
            Tensor gt = detail::suite_probe(rng, {6, 2});
            record("losses", "weighted_loss_mse", {pred},
                   [=] { return weighted_loss(pred, gt, schedule, BaseLossKind::mse); });
        }
        {
            // pred = gt + diff with |diff| away from the Huber kink at 1.
            std::vector<double> gt_values = detail::suite_values(rng, 12);
            std::vector<double> diff = detail::suite_values(rng, 12, {-1.0, 1.0});
            std::vector<double> pred_values(12);
            for (std::size_t i = 0; i < 12; ++i) {
                pred_values[i] = gt_values[i] + diff[i];
            }
            Tensor pred({6, 2}, std::move(pred_values), true);
            Tensor gt({6, 2}, std::move(gt_values));
            record("losses", "weighted_loss_smooth_l1", {pred}, [=] {
                return weighted_loss(pred, gt, schedule, BaseLossKind::smooth_l1);
            });
        }
        {
            // One sample hugs the target so the best-of-K winner has a wide
            // margin and differences never cross the argmin boundary.
            Tensor gt = detail::suite_probe(rng, {6, 2});
            std::vector<double> near(12), far_a(12), far_b(12);
            const auto gv = gt.data();
            for (std::size_t i = 0; i < 12; ++i) {
                near[i] = gv[i] + 0.05 * rng.uniform(-1.0, 1.0);
                far_a[i] = gv[i] + 1.5 + 0.2 * rng.uniform(0.0, 1.0);
                far_b[i] = gv[i] - 1.5 - 0.2 * rng.uniform(0.0, 1.0);
            }
            Tensor s0({6, 2}, std::move(near), true);
            Tensor s1({6, 2}, std::move(far_a), true);
            Tensor s2({6, 2}, std::move(far_b), true);
            record("losses", "best_of_k_loss", {s0, s1, s2}, [=] {
                std::vector<Tensor> samples{s0, s1, s2};
                return best_of_k_loss(std::span<const Tensor>(samples), gt, schedule,
                                      BaseLossKind::mse)
                    .loss;
            });
        }
        {
            Tensor traj({1}, {0.9}, true);
            Tensor kl({1}, {0.6}, true);
            record("losses", "final_loss", {traj, kl},
                   [=] { return final_loss(traj, kl, 0.7); });
        }
    }

    if (all || module == "objective") {
        Rng rng(606);
        TrajectoryWindow w = detail::suite_window(4, 6, rng);
        SceneLatentTable latents = detail::suite_latents(w, 3, rng);
        LossConfig loss = detail::suite_loss_config();
        for (auto mode : {PredictionMode::deterministic, PredictionMode::stochastic}) {
            Model model(detail::suite_model_config(mode), 0xA57A);
            std::vector<Tensor> leaves;
            for (auto& [name, tensor] : model.params().entries()) {
                leaves.push_back(tensor);
            }
            record("objective",
                   mode == PredictionMode::deterministic ? "deterministic_training_loss"
                                                         : "stochastic_training_loss",
                   std::move(leaves),
                   [&model, w, latents, loss] {
                       return model.training_loss(w, latents, loss, Rng(7));
                   });
        }
    }

    return checks;
}

}  // namespace astra
