#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "astra/cvae.hpp"
#include "astra/params.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"
#include "oracles.hpp"

using namespace astra;

namespace {

std::vector<DenseLayer> zero_net(std::size_t in, std::size_t out,
                                 std::vector<double> bias = {}) {
    Tensor b = bias.empty() ? Tensor::zeros({out}) : Tensor({out}, std::move(bias));
    return {DenseLayer{Tensor::zeros({in, out}), b, Activation::identity}};
}

std::vector<DenseLayer> random_net(ModelParams& store, const std::string& prefix,
                                   std::initializer_list<std::size_t> widths, Rng& rng) {
    return make_mlp(store, prefix, widths, Activation::relu, Activation::identity, rng);
}

}  // namespace

TEST_CASE("condition vector fuses scene and agent means") {
    const std::size_t t_obs = 3, a_count = 2, d = 4;
    SECTION("constant embeddings give identical rows") {
        const Tensor scene = Tensor::full({t_obs, d}, 0.5);
        const Tensor agents = Tensor::full({a_count * t_obs, d}, -1.5);
        const Tensor c = condition_vector(scene, agents, a_count);
        REQUIRE(c.shape() == std::vector<std::size_t>{a_count, 2 * d});
        for (std::size_t i = 0; i < d; ++i) {
            CHECK(c.at({0, i}) == Catch::Approx(0.5).margin(1e-15));
            CHECK(c.at({0, d + i}) == Catch::Approx(-1.5).margin(1e-15));
            CHECK(c.at({1, i}) == c.at({0, i}));
            CHECK(c.at({1, d + i}) == c.at({0, d + i}));
        }
    }
    SECTION("single agent averages its own tokens") {
        const Tensor scene = Tensor::zeros({2, 2});
        const Tensor agents({2, 2}, {1.0, 2.0, 3.0, 4.0});
        const Tensor c = condition_vector(scene, agents, 1);
        CHECK(c.at({0, 2}) == Catch::Approx(2.0).margin(1e-15));
        CHECK(c.at({0, 3}) == Catch::Approx(3.0).margin(1e-15));
    }
    SECTION("permuting agents permutes condition rows bit-exactly") {
        Rng rng(3);
        const std::size_t a3 = 3;
        const Tensor scene({t_obs, d}, oracle::random_values(rng, t_obs * d));
        const Tensor agents({a3 * t_obs, d}, oracle::random_values(rng, a3 * t_obs * d));
        const Tensor c = condition_vector(scene, agents, a3);

        // Swap agents 0 and 2 inside every frame block.
        std::vector<std::size_t> idx;
        for (std::size_t t = 0; t < t_obs; ++t) {
            idx.push_back(t * a3 + 2);
            idx.push_back(t * a3 + 1);
            idx.push_back(t * a3 + 0);
        }
        const Tensor c_swapped = condition_vector(scene, gather_rows(agents, idx), a3);
        for (std::size_t j = 0; j < 2 * d; ++j) {
            REQUIRE(c_swapped.at({0, j}) == c.at({2, j}));
            REQUIRE(c_swapped.at({1, j}) == c.at({1, j}));
            REQUIRE(c_swapped.at({2, j}) == c.at({0, j}));
        }
    }
    SECTION("token count mismatch is rejected") {
        CHECK_THROWS_AS(condition_vector(Tensor::zeros({3, 4}), Tensor::zeros({5, 4}), 2),
                        ShapeError);
    }
}

TEST_CASE("gaussian head splits and clamps") {
    const Tensor raw({1, 4}, {0.5, -0.25, 99.0, -99.0});
    const auto g = gaussian_head(raw);
    CHECK(g.mu.at({0, 0}) == 0.5);
    CHECK(g.mu.at({0, 1}) == -0.25);
    CHECK(g.logvar.at({0, 0}) == kLogVarMax);
    CHECK(g.logvar.at({0, 1}) == kLogVarMin);
    CHECK_THROWS_AS(gaussian_head(Tensor::zeros({1, 3})), ShapeError);
}

TEST_CASE("prior network hand cases") {
    SECTION("zero weights give the standard normal") {
        const auto net = zero_net(3, 4);
        const auto g = prior_params(Tensor::zeros({2, 3}), net);
        for (double v : g.mu.data()) {
            CHECK(v == 0.0);
        }
        for (double v : g.logvar.data()) {
            CHECK(v == 0.0);
        }
    }
    SECTION("logvar head bias of 2 gives sigma e") {
        const auto net = zero_net(3, 4, {0.0, 0.0, 2.0, 2.0});
        const auto g = prior_params(Tensor::zeros({1, 3}), net);
        const double sigma = std::exp(0.5 * g.logvar.at({0, 0}));
        CHECK(sigma == Catch::Approx(std::exp(1.0)).epsilon(1e-12));
        CHECK(sigma == Catch::Approx(2.71828).margin(1e-5));
    }
    SECTION("identical conditions give identical params") {
        ModelParams store;
        Rng rng(5);
        const auto net = random_net(store, "prior", {3, 8, 4}, rng);
        const Tensor c({2, 3}, {1.0, 2.0, 3.0, 1.0, 2.0, 3.0});
        const auto g = prior_params(c, net);
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(g.mu.at({0, j}) == g.mu.at({1, j}));
            CHECK(g.logvar.at({0, j}) == g.logvar.at({1, j}));
        }
    }
}

TEST_CASE("posterior network") {
    SECTION("zero weights give the standard normal regardless of the future") {
        const auto future_net = zero_net(4, 3);
        const auto posterior_net = zero_net(5, 6);
        const Tensor c = Tensor::zeros({1, 2});
        const auto g1 = posterior_params(c, Tensor::full({1, 4}, 7.0), future_net, posterior_net);
        const auto g2 = posterior_params(c, Tensor::full({1, 4}, -3.0), future_net, posterior_net);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(g1.mu.at({0, j}) == 0.0);
            CHECK(g1.logvar.at({0, j}) == 0.0);
            CHECK(g2.mu.at({0, j}) == 0.0);
        }
    }
    SECTION("the future influences the parameters through the gradient") {
        ModelParams store;
        Rng rng(7);
        const auto future_net = random_net(store, "future", {4, 6}, rng);
        const auto posterior_net = random_net(store, "posterior", {8, 6}, rng);
        const Tensor c({1, 2}, {0.3, -0.4});
        Tensor future({1, 4}, {0.1, 0.2, 0.3, 0.4}, true);
        auto g = posterior_params(c, future, future_net, posterior_net);
        backward(sum(g.mu));
        bool any = false;
        for (double v : future.grad()) {
            any = any || v != 0.0;
        }
        CHECK(any);
    }
    SECTION("row count mismatch is rejected") {
        const auto future_net = zero_net(4, 3);
        const auto posterior_net = zero_net(5, 6);
        CHECK_THROWS_AS(posterior_params(Tensor::zeros({2, 2}), Tensor::zeros({1, 4}),
                                         future_net, posterior_net),
                        ShapeError);
    }
}

TEST_CASE("reparameterization hand cases") {
    SECTION("zero noise returns the mean") {
        GaussianParams g{Tensor({1, 2}, {3.0, -1.0}), Tensor({1, 2}, {0.7, -0.2})};
        const Tensor z = reparameterize(g, Tensor::zeros({1, 2}));
        CHECK(z.at({0, 0}) == 3.0);
        CHECK(z.at({0, 1}) == -1.0);
    }
    SECTION("unit variance scales the noise directly") {
        GaussianParams g{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})};
        CHECK(reparameterize(g, Tensor({1, 1}, {0.5})).item() == 0.5);
    }
    SECTION("sigma two flips a unit of noise to minus one") {
        GaussianParams g{Tensor({1, 1}, {1.0}), Tensor({1, 1}, {2.0 * std::log(2.0)})};
        CHECK(reparameterize(g, Tensor({1, 1}, {-1.0})).item() ==
              Catch::Approx(-1.0).margin(1e-12));
    }
}

TEST_CASE("KL divergence closed form") {
    SECTION("identical distributions give zero") {
        GaussianParams p{Tensor({1, 3}, {0.3, -0.7, 1.1}), Tensor({1, 3}, {0.2, -0.5, 1.9})};
        CHECK(kl_divergence(p, p).item() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("unit-variance mean shift") {
        GaussianParams q{Tensor({1, 1}, {1.0}), Tensor::zeros({1, 1})};
        GaussianParams p{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})};
        CHECK(kl_divergence(q, p).item() == Catch::Approx(0.5).margin(1e-12));
    }
    SECTION("variance-four case") {
        GaussianParams q{Tensor::zeros({1, 1}), Tensor({1, 1}, {std::log(4.0)})};
        GaussianParams p{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})};
        CHECK(kl_divergence(q, p).item() ==
              Catch::Approx(1.5 - std::log(2.0)).margin(1e-12));
        CHECK(kl_divergence(q, p).item() == Catch::Approx(0.80685).margin(1e-5));
    }
    SECTION("nonnegative over random parameter draws") {
        Rng rng(11);
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t d = 1 + rng.index(4);
            GaussianParams q{Tensor({1, d}, oracle::random_values(rng, d, -3.0, 3.0)),
                             Tensor({1, d}, oracle::random_values(rng, d, -2.0, 2.0))};
            GaussianParams p{Tensor({1, d}, oracle::random_values(rng, d, -3.0, 3.0)),
                             Tensor({1, d}, oracle::random_values(rng, d, -2.0, 2.0))};
            CHECK(kl_divergence(q, p).item() >= 0.0);
        }
    }
    SECTION("rows add up") {
        GaussianParams q{Tensor({2, 1}, {1.0, 1.0}), Tensor::zeros({2, 1})};
        GaussianParams p{Tensor::zeros({2, 1}), Tensor::zeros({2, 1})};
        CHECK(kl_divergence(q, p).item() == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("KL divergence matches seeded Monte-Carlo estimates") {
    Rng rng(123);
    for (int pair = 0; pair < 50; ++pair) {
        const std::size_t d = 3;
        std::vector<double> mu_q = oracle::random_values(rng, d, -2.0, 2.0);
        std::vector<double> logvar_q = oracle::random_values(rng, d, -2.0, 2.0);
        std::vector<double> logvar_p = oracle::random_values(rng, d, -2.0, 2.0);
        // Keep the means separated so the KL value is well above the
        // Monte-Carlo noise floor for the 2% comparison.
        std::vector<double> mu_p(d);
        for (std::size_t i = 0; i < d; ++i) {
            mu_p[i] = mu_q[i] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(1.0, 2.0);
        }
        GaussianParams q{Tensor({1, d}, mu_q), Tensor({1, d}, logvar_q)};
        GaussianParams p{Tensor({1, d}, mu_p), Tensor({1, d}, logvar_p)};
        const double closed = kl_divergence(q, p).item();

        Rng mc_rng = rng.fork(static_cast<std::uint64_t>(pair));
        const double estimate = oracle::mc_kl(mu_q, logvar_q, mu_p, logvar_p, 100000, mc_rng);
        INFO("pair " << pair << " closed " << closed << " mc " << estimate);
        CHECK(std::abs(estimate - closed) / closed < 0.02);
    }
}

TEST_CASE("generation network") {
    SECTION("zero weights emit the bias for any latent") {
        const auto net = zero_net(5, 3, {1.0, 2.0, 3.0});
        const Tensor c({1, 3}, {9.0, 9.0, 9.0});
        const Tensor z({1, 2}, {-5.0, 5.0});
        const Tensor y = astra::generate(c, z, net);
        CHECK(y.at({0, 0}) == 1.0);
        CHECK(y.at({0, 1}) == 2.0);
        CHECK(y.at({0, 2}) == 3.0);
    }
    SECTION("distinct latents give distinct outputs") {
        ModelParams store;
        Rng rng(13);
        const auto net = random_net(store, "gen", {5, 4}, rng);
        const Tensor c({1, 3}, {0.1, 0.2, 0.3});
        const Tensor y1 = astra::generate(c, Tensor({1, 2}, {1.0, 0.0}), net);
        const Tensor y2 = astra::generate(c, Tensor({1, 2}, {0.0, 1.0}), net);
        bool differs = false;
        for (std::size_t j = 0; j < 4; ++j) {
            differs = differs || y1.at({0, j}) != y2.at({0, j});
        }
        CHECK(differs);
    }
    SECTION("unconditioned variant consumes only the latent") {
        const auto net = zero_net(2, 3, {4.0, 4.0, 4.0});
        const Tensor c({1, 7}, std::vector<double>(7, 1.0));
        const Tensor y = astra::generate(c, Tensor({1, 2}, {0.5, 0.5}), net, false);
        CHECK(y.at({0, 0}) == 4.0);
    }
}

TEST_CASE("displacement decoding") {
    const std::size_t t_pred = 3;
    SECTION("zero displacements repeat the last observed position") {
        const auto net = zero_net(2, t_pred * 2);
        const Tensor input = Tensor::zeros({2, 2});
        const Tensor last_obs({2, 2}, {1.0, 2.0, -3.0, 4.0});
        const auto trajs = decode_displacements(input, net, last_obs, t_pred, 2);
        REQUIRE(trajs.size() == 2);
        for (std::size_t t = 0; t < t_pred; ++t) {
            CHECK(trajs[0].at({t, 0}) == 1.0);
            CHECK(trajs[0].at({t, 1}) == 2.0);
            CHECK(trajs[1].at({t, 0}) == -3.0);
            CHECK(trajs[1].at({t, 1}) == 4.0);
        }
    }
    SECTION("constant displacement accumulates linearly") {
        std::vector<double> bias(t_pred * 2, 0.0);
        for (std::size_t t = 0; t < t_pred; ++t) {
            bias[2 * t] = 1.0;  // (1, 0) every step
        }
        const auto net = zero_net(2, t_pred * 2, std::move(bias));
        const Tensor last_obs({1, 2}, {10.0, 5.0});
        const auto trajs = decode_displacements(Tensor::zeros({1, 2}), net, last_obs, t_pred, 2);
        for (std::size_t t = 0; t < t_pred; ++t) {
            CHECK(trajs[0].at({t, 0}) == 10.0 + static_cast<double>(t + 1));
            CHECK(trajs[0].at({t, 1}) == 5.0);
        }
    }
    SECTION("bbox coordinates integrate per corner coordinate") {
        std::vector<double> bias(t_pred * 4, 0.0);
        for (std::size_t t = 0; t < t_pred; ++t) {
            bias[4 * t + 0] = 1.0;
            bias[4 * t + 3] = -1.0;
        }
        const auto net = zero_net(2, t_pred * 4, std::move(bias));
        const Tensor last_obs({1, 4}, {0.0, 0.0, 10.0, 10.0});
        const auto trajs = decode_displacements(Tensor::zeros({1, 2}), net, last_obs, t_pred, 4);
        CHECK(trajs[0].at({2, 0}) == 3.0);
        CHECK(trajs[0].at({2, 1}) == 0.0);
        CHECK(trajs[0].at({2, 2}) == 10.0);
        CHECK(trajs[0].at({2, 3}) == 7.0);
    }
    SECTION("decoder width mismatch is rejected") {
        const auto net = zero_net(2, 5);  // not t_pred * coord_dim
        CHECK_THROWS_AS(
            decode_displacements(Tensor::zeros({1, 2}), net, Tensor::zeros({1, 2}), t_pred, 2),
            ShapeError);
    }
}

namespace {

struct SamplerFixture {
    ModelParams store;
    std::vector<DenseLayer> prior, generation, decoder;
    std::size_t d_c = 4, d_z = 2, t_pred = 3;

    explicit SamplerFixture(std::uint64_t seed, double prior_logvar_bias = 0.0) {
        Rng rng(seed);
        prior = random_net(store, "prior", {d_c, 2 * d_z}, rng);
        if (prior_logvar_bias != 0.0) {
            auto bias = prior.back().bias.mutable_data();
            for (std::size_t i = d_z; i < 2 * d_z; ++i) {
                bias[i] = prior_logvar_bias;
            }
            // Kill the weight path into the logvar head so the bias rules.
            auto w = prior.back().weight.mutable_data();
            for (std::size_t r = 0; r < d_c; ++r) {
                for (std::size_t i = d_z; i < 2 * d_z; ++i) {
                    w[r * 2 * d_z + i] = 0.0;
                }
            }
        }
        generation = random_net(store, "gen", {d_c + d_z, 6}, rng);
        decoder = random_net(store, "dec", {6, t_pred * 2}, rng);
    }

    CvaeNets nets() const { return {prior, generation, decoder, true}; }
};

}  // namespace

TEST_CASE("trajectory sampling") {
    SamplerFixture fix(17);
    Rng cond_rng(19);
    const Tensor condition({2, 4}, oracle::random_values(cond_rng, 8));
    const Tensor last_obs({2, 2}, {0.0, 0.0, 1.0, 1.0});
    const std::vector<std::int64_t> ids{5, 9};

    SECTION("same seed gives identical prediction sets") {
        const auto a = sample_trajectories(condition, ids, last_obs, 4, Rng(42), fix.nets(),
                                           fix.t_pred, 2);
        const auto b = sample_trajectories(condition, ids, last_obs, 4, Rng(42), fix.nets(),
                                           fix.t_pred, 2);
        CHECK(a.trajectories == b.trajectories);
        CHECK(a.latents_used == b.latents_used);
        const auto c = sample_trajectories(condition, ids, last_obs, 4, Rng(43), fix.nets(),
                                           fix.t_pred, 2);
        CHECK(a.trajectories != c.trajectories);
    }
    SECTION("shapes and bookkeeping") {
        const auto set = sample_trajectories(condition, ids, last_obs, 20, Rng(1), fix.nets(),
                                             fix.t_pred, 2);
        CHECK(set.mode == PredictionMode::stochastic);
        CHECK(set.k == 20);
        CHECK(set.agents() == 2);
        CHECK(set.trajectories.size() == 2 * 20 * fix.t_pred * 2);
        CHECK(set.latents_used.size() == 2 * 20 * fix.d_z);
        CHECK(set.trajectory(1, 19).size() == fix.t_pred * 2);
        CHECK(set.latent(0, 0).size() == fix.d_z);
    }
    SECTION("permuting agents permutes samples bit-exactly") {
        const auto fwd = sample_trajectories(condition, ids, last_obs, 3, Rng(7), fix.nets(),
                                             fix.t_pred, 2);
        const Tensor cond_rev = gather_rows(condition, {1, 0});
        const Tensor last_rev = gather_rows(last_obs, {1, 0});
        const auto rev = sample_trajectories(cond_rev, {9, 5}, last_rev, 3, Rng(7), fix.nets(),
                                             fix.t_pred, 2);
        for (std::size_t k = 0; k < 3; ++k) {
            const auto t0 = fwd.trajectory(0, k);
            const auto t0r = rev.trajectory(1, k);
            const auto t1 = fwd.trajectory(1, k);
            const auto t1r = rev.trajectory(0, k);
            for (std::size_t i = 0; i < t0.size(); ++i) {
                REQUIRE(t0[i] == t0r[i]);
                REQUIRE(t1[i] == t1r[i]);
            }
        }
    }
    SECTION("tiny prior variance collapses the samples") {
        SamplerFixture tight(17, kLogVarMin);
        const auto set = sample_trajectories(condition, ids, last_obs, 20, Rng(3), tight.nets(),
                                             tight.t_pred, 2);
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t k = 1; k < 20; ++k) {
                const auto first = set.trajectory(a, 0);
                const auto other = set.trajectory(a, k);
                double total = 0.0;
                for (std::size_t t = 0; t < tight.t_pred; ++t) {
                    total += std::hypot(other[2 * t] - first[2 * t],
                                        other[2 * t + 1] - first[2 * t + 1]);
                }
                CHECK(total / static_cast<double>(tight.t_pred) < 0.05);
            }
        }
    }
    SECTION("K must be positive and ids must match") {
        CHECK_THROWS_AS(sample_trajectories(condition, ids, last_obs, 0, Rng(1), fix.nets(),
                                            fix.t_pred, 2),
                        ContractError);
        CHECK_THROWS_AS(sample_trajectories(condition, {1}, last_obs, 2, Rng(1), fix.nets(),
                                            fix.t_pred, 2),
                        ShapeError);
    }
    SECTION("non-finite outputs are a numeric error") {
        SamplerFixture blow(17);
        for (auto& v : blow.decoder.front().weight.mutable_data()) {
            v = 1e308;
        }
        for (auto& v : blow.generation.front().weight.mutable_data()) {
            v = 1e308;
        }
        CHECK_THROWS_AS(sample_trajectories(condition, ids, last_obs, 1, Rng(1), blow.nets(),
                                            blow.t_pred, 2),
                        NumericError);
    }
}

TEST_CASE("stochastic objective pieces differentiate end to end") {
    // Reparameterized sample -> generation -> decode -> weighted error plus
    // KL, all through one backward pass; checked against finite differences
    // in the gradcheck suite. Here: gradients exist and are finite.
    ModelParams store;
    Rng rng(23);
    auto future_net = random_net(store, "future", {6, 4}, rng);
    auto posterior_net = random_net(store, "post", {8, 4}, rng);
    auto prior_net = random_net(store, "prior", {4, 4}, rng);
    auto generation_net = random_net(store, "gen", {6, 5}, rng);
    auto decoder_net = random_net(store, "dec", {5, 6}, rng);

    const Tensor c({1, 4}, {0.1, -0.2, 0.3, -0.4});
    const Tensor future_flat({1, 6}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    const Tensor gt({3, 2}, {0.0, 0.1, 0.2, 0.3, 0.4, 0.5});
    const Tensor last_obs({1, 2}, {0.0, 0.0});
    const Tensor noise({1, 2}, {0.3, -0.7});

    auto posterior = posterior_params(c, future_flat, future_net, posterior_net);
    auto prior = prior_params(c, prior_net);
    Tensor z = reparameterize(posterior, noise);
    Tensor y_latent = astra::generate(c, z, generation_net);
    auto trajs = decode_displacements(y_latent, decoder_net, last_obs, 3, 2);
    Tensor err = sum(mul(sub(trajs[0], gt), sub(trajs[0], gt)));
    Tensor kl = kl_divergence(posterior, prior);
    Tensor total = add(err, kl);
    backward(total);

    std::size_t nonzero = 0;
    for (const auto& [name, t] : store.entries()) {
        for (double g : t.grad()) {
            REQUIRE(std::isfinite(g));
            nonzero += g != 0.0 ? 1 : 0;
        }
    }
    CHECK(nonzero > 0);
}
