#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "astra/gradcheck.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"
#include "oracles.hpp"

using namespace astra;

namespace {

// Random values in [-2, 2], resampled to stay `margin` away from the kink
// locations of non-smooth ops so central differences remain valid.
std::vector<double> smooth_values(Rng& rng, std::size_t n, const std::vector<double>& kinks,
                                  double margin = 1e-3) {
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

std::vector<std::size_t> random_shape(Rng& rng) {
    const std::size_t rank = 1 + rng.index(3);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
        d = 1 + rng.index(4);
    }
    return shape;
}

// Reduces an op output to a scalar against a fixed random probe so every
// output coordinate influences the objective differently.
Tensor probe_scalar(const Tensor& out, Rng& rng) {
    auto pv = oracle::random_values(rng, out.size(), -1.0, 1.0);
    return sum(mul(out, Tensor(out.shape(), pv)));
}

// 20 random draws through `op`; every coordinate checked against central
// differences at the default h = 1e-5.
void check_unary(const std::function<Tensor(const Tensor&)>& op,
                 const std::vector<double>& kinks = {}, std::uint64_t seed = 1234) {
    Rng rng(seed);
    for (int trial = 0; trial < 20; ++trial) {
        auto shape = random_shape(rng);
        std::size_t n = 1;
        for (auto d : shape) {
            n *= d;
        }
        Tensor x(shape, smooth_values(rng, n, kinks), true);
        // The probe rng is rebuilt per call so the +h and -h evaluations see
        // identical probe weights.
        auto f = [&, tag = trial]() {
            Rng local = rng.fork(static_cast<std::uint64_t>(tag + 1000));
            return probe_scalar(op(x), local);
        };
        std::vector<Tensor> leaves{x};
        auto result = gradient_check(f, leaves);
        INFO(result.worst);
        REQUIRE(result.checked > 0);
        REQUIRE(result.pass(1e-5));
    }
}

}  // namespace

TEST_CASE("gradient_check API basics") {
    SECTION("quadratic objective is exact to rounding") {
        Tensor x = Tensor::vec({0.5, -1.25, 2.0}, true);
        std::vector<Tensor> leaves{x};
        auto result = gradient_check([&]() { return sum(mul(x, x)); }, leaves);
        REQUIRE(result.checked == 3);
        REQUIRE(result.max_rel_err < 1e-7);
    }
    SECTION("step size outside the supported range is rejected") {
        Tensor x = Tensor::vec({1.0}, true);
        std::vector<Tensor> leaves{x};
        GradCheckOptions opts;
        opts.h = 1e-2;
        REQUIRE_THROWS_AS(gradient_check([&]() { return sum(x); }, leaves, opts), ContractError);
    }
    SECTION("kink coordinates are skipped and counted") {
        // smooth_l1 at |x| = 1 exactly: flagged non-smooth, not checked.
        Tensor x = Tensor::vec({1.0, 0.25}, true);
        std::vector<Tensor> leaves{x};
        GradCheckOptions opts;
        opts.near_kink = [&](std::size_t, std::size_t coord) {
            return std::abs(std::abs(x.data()[coord]) - 1.0) <= opts.h;
        };
        auto result = gradient_check([&]() { return sum(smooth_l1(x)); }, leaves, opts);
        REQUIRE(result.skipped == 1);
        REQUIRE(result.checked == 1);
        REQUIRE(result.pass(1e-5));
    }
    SECTION("coordinate sampling bounds the probe count") {
        Tensor x({4, 4}, std::vector<double>(16, 0.5), true);
        std::vector<Tensor> leaves{x};
        GradCheckOptions opts;
        opts.max_coords_per_leaf = 5;
        auto result = gradient_check([&]() { return sum(mul(x, x)); }, leaves, opts);
        REQUIRE(result.checked == 5);
    }
}

TEST_CASE("elementwise ops pass finite-difference checks") {
    check_unary([](const Tensor& x) { return relu(x); }, {0.0}, 11);
    check_unary([](const Tensor& x) { return gelu(x); }, {}, 12);
    check_unary([](const Tensor& x) { return exp(x); }, {}, 13);
    check_unary([](const Tensor& x) { return smooth_l1(x); }, {-1.0, 1.0}, 14);
    check_unary([](const Tensor& x) { return clamp(x, -1.5, 1.5); }, {-1.5, 1.5}, 15);
    check_unary([](const Tensor& x) { return scale(x, -2.5); }, {}, 16);
    check_unary([](const Tensor& x) { return add_scalar(x, 3.0); }, {}, 17);
    check_unary([](const Tensor& x) { return neg(x); }, {}, 18);
}

TEST_CASE("normalization ops pass finite-difference checks") {
    check_unary([](const Tensor& x) { return softmax_last_dim(x); }, {}, 21);
    check_unary(
        [](const Tensor& x) {
            const std::size_t d = x.shape().back();
            return layer_norm(x, Tensor::full({d}, 1.1), Tensor::full({d}, -0.2), 1e-5);
        },
        {}, 22);

    SECTION("layer_norm gain and shift gradients") {
        Rng rng(23);
        Tensor x({3, 4}, oracle::random_values(rng, 12), true);
        Tensor gamma({4}, oracle::random_values(rng, 4), true);
        Tensor beta({4}, oracle::random_values(rng, 4), true);
        std::vector<Tensor> leaves{x, gamma, beta};
        Rng probe(99);
        auto probe_vals = oracle::random_values(probe, 12, -1.0, 1.0);
        auto f = [&]() {
            return sum(mul(layer_norm(x, gamma, beta, 1e-5), Tensor({3, 4}, probe_vals)));
        };
        auto result = gradient_check(f, leaves);
        INFO(result.worst);
        REQUIRE(result.pass(1e-5));
    }
}

TEST_CASE("reduction and structural ops pass finite-difference checks") {
    check_unary([](const Tensor& x) { return sum(x); }, {}, 31);
    check_unary([](const Tensor& x) { return sum_stable(x); }, {}, 32);
    check_unary([](const Tensor& x) { return mean(x); }, {}, 33);
    check_unary([](const Tensor& x) { return reshape(x, {x.size()}); }, {}, 34);
    check_unary(
        [](const Tensor& x) {
            Tensor flat = reshape(x, {x.size(), 1});
            return cumsum_rows(flat);
        },
        {}, 35);
    check_unary(
        [](const Tensor& x) {
            Tensor flat = reshape(x, {1, x.size()});
            return concat_cols({flat, scale(flat, 2.0)});
        },
        {}, 36);
    check_unary(
        [](const Tensor& x) {
            Tensor flat = reshape(x, {1, x.size()});
            return concat_rows({flat, scale(flat, -1.0)});
        },
        {}, 37);
    check_unary(
        [](const Tensor& x) {
            Tensor flat = reshape(x, {1, x.size()});
            return x.size() > 1 ? slice_cols(flat, 1, x.size() - 1) : flat;
        },
        {}, 38);
    check_unary(
        [](const Tensor& x) {
            Tensor flat = reshape(x, {x.size(), 1});
            std::vector<std::size_t> idx{0, x.size() - 1, 0};
            return gather_rows(flat, idx);
        },
        {}, 39);
    check_unary([](const Tensor& x) { return transpose(reshape(x, {1, x.size()})); }, {}, 40);
}

TEST_CASE("binary ops pass finite-difference checks") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.index(4);
        const std::size_t k = 1 + rng.index(4);
        const std::size_t n = 1 + rng.index(4);
        Tensor a({m, k}, oracle::random_values(rng, m * k), true);
        Tensor b({k, n}, oracle::random_values(rng, k * n), true);
        std::vector<Tensor> leaves{a, b};
        auto probe_vals = oracle::random_values(rng, m * n, -1.0, 1.0);

        auto check = [&](auto&& op) {
            auto f = [&]() { return sum(mul(op(a, b), Tensor({m, n}, probe_vals))); };
            auto result = gradient_check(f, leaves);
            INFO(result.worst);
            REQUIRE(result.pass(1e-5));
        };
        check([](const Tensor& x, const Tensor& y) { return matmul(x, y); });
        check([](const Tensor& x, const Tensor& y) { return matmul_stable(x, y); });
    }

    SECTION("elementwise pairs and bias_add") {
        Rng rng2(42);
        Tensor a({3, 4}, oracle::random_values(rng2, 12), true);
        Tensor b({3, 4}, oracle::random_values(rng2, 12), true);
        Tensor bias({4}, oracle::random_values(rng2, 4), true);
        auto probe_vals = oracle::random_values(rng2, 12, -1.0, 1.0);
        Tensor probe({3, 4}, probe_vals);

        for (auto&& f : std::vector<std::function<Tensor()>>{
                 [&]() { return sum(mul(add(a, b), probe)); },
                 [&]() { return sum(mul(sub(a, b), probe)); },
                 [&]() { return sum(mul(mul(a, b), probe)); },
                 [&]() { return sum(mul(bias_add(a, bias), probe)); },
             }) {
            std::vector<Tensor> leaves{a, b, bias};
            auto result = gradient_check(f, leaves);
            INFO(result.worst);
            REQUIRE(result.pass(1e-5));
        }
    }
}

TEST_CASE("mlp stack passes finite-difference checks") {
    Rng rng(51);
    Tensor w1({3, 5}, oracle::random_values(rng, 15), true);
    Tensor b1({5}, oracle::random_values(rng, 5), true);
    Tensor w2({5, 2}, oracle::random_values(rng, 10), true);
    Tensor b2({2}, oracle::random_values(rng, 2), true);
    Tensor x({4, 3}, oracle::random_values(rng, 12), true);
    std::vector<DenseLayer> layers{
        {w1, b1, Activation::gelu},
        {w2, b2, Activation::identity},
    };
    auto probe_vals = oracle::random_values(rng, 8, -1.0, 1.0);
    auto f = [&]() { return sum(mul(mlp_forward(x, layers), Tensor({4, 2}, probe_vals))); };
    std::vector<Tensor> leaves{x, w1, b1, w2, b2};
    auto result = gradient_check(f, leaves);
    INFO(result.worst);
    REQUIRE(result.pass(1e-5));
}
