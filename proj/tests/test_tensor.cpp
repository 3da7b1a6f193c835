#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "astra/rng.hpp"
#include "astra/tensor.hpp"
#include "oracles.hpp"

using namespace astra;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, bool requires_grad = false) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return Tensor(std::move(shape), oracle::random_values(rng, n), requires_grad);
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.shape() == std::vector<std::size_t>{2, 3});
    REQUIRE(t.size() == 6);
    REQUIRE(t.at({1, 2}) == 6.0);
    REQUIRE_FALSE(t.requires_grad());

    REQUIRE_THROWS_AS(Tensor({2, 3}, {1, 2}), ShapeError);
    REQUIRE_THROWS_AS(Tensor({2, 0}, {}), ShapeError);
    REQUIRE_THROWS_AS(Tensor::scalar(1.5).at({0, 0}), ShapeError);
    REQUIRE_THROWS_AS(Tensor().shape(), ContractError);

    Tensor s = Tensor::scalar(4.25);
    REQUIRE(s.item() == 4.25);
    REQUIRE_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("matmul hand values and errors") {
    SECTION("identity times M is M") {
        Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
        Tensor m = Tensor::matrix({{3.5, -2}, {7, 0.25}});
        Tensor out = matmul(eye, m);
        for (std::size_t i = 0; i < 4; ++i) {
            REQUIRE(out.data()[i] == m.data()[i]);
        }
    }
    SECTION("2x2 by 2x1") {
        Tensor out = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
        REQUIRE(out.shape() == std::vector<std::size_t>{2, 1});
        REQUIRE(out.data()[0] == 17.0);
        REQUIRE(out.data()[1] == 39.0);
    }
    SECTION("inner dimension mismatch") {
        Tensor a = Tensor::zeros({2, 3});
        REQUIRE_THROWS_AS(matmul(a, a), ShapeError);
        REQUIRE_THROWS_MATCHES(matmul(a, a), ShapeError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("[2 x 3]")));
    }
}

TEST_CASE("matmul matches reference on random shapes") {
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.index(5);
        const std::size_t k = 1 + rng.index(5);
        const std::size_t n = 1 + rng.index(5);
        auto av = oracle::random_values(rng, m * k);
        auto bv = oracle::random_values(rng, k * n);
        auto expect = oracle::matmul(av, m, k, bv, n);

        Tensor c = matmul(Tensor({m, k}, av), Tensor({k, n}, bv));
        Tensor cs = matmul_stable(Tensor({m, k}, av), Tensor({k, n}, bv));
        for (std::size_t i = 0; i < expect.size(); ++i) {
            REQUIRE(c.data()[i] == Catch::Approx(expect[i]).margin(1e-12));
            REQUIRE(cs.data()[i] == Catch::Approx(expect[i]).margin(1e-12));
        }
    }
}

TEST_CASE("matmul_stable is bit-stable under row permutation of the contracted axis") {
    // out = w^T v where both w rows and v rows are permuted together; this is
    // the shape attention-apply uses (weights x values over token order).
    Rng rng(7);
    const std::size_t k = 11, n = 5;
    auto wv = oracle::random_values(rng, k);
    auto vv = oracle::random_values(rng, k * n);

    std::vector<std::size_t> perm(k);
    for (std::size_t i = 0; i < k; ++i) {
        perm[i] = i;
    }
    Rng shuffler(9);
    shuffler.shuffle(perm);

    std::vector<double> wp(k), vp(k * n);
    for (std::size_t i = 0; i < k; ++i) {
        wp[i] = wv[perm[i]];
        for (std::size_t j = 0; j < n; ++j) {
            vp[i * n + j] = vv[perm[i] * n + j];
        }
    }

    Tensor base = matmul_stable(Tensor({1, k}, wv), Tensor({k, n}, vv));
    Tensor permuted = matmul_stable(Tensor({1, k}, wp), Tensor({k, n}, vp));
    for (std::size_t j = 0; j < n; ++j) {
        // Bit-identical, not approximately equal.
        REQUIRE(base.data()[j] == permuted.data()[j]);
    }
}

TEST_CASE("softmax values and properties") {
    SECTION("symmetry") {
        Tensor out = softmax_last_dim(Tensor::vec({0, 0}));
        REQUIRE(out.data()[0] == Catch::Approx(0.5).margin(1e-15));
        REQUIRE(out.data()[1] == Catch::Approx(0.5).margin(1e-15));
    }
    SECTION("closed-form ratio") {
        Tensor out = softmax_last_dim(Tensor::vec({0.0, std::log(3.0)}));
        REQUIRE(out.data()[0] == Catch::Approx(0.25).margin(1e-12));
        REQUIRE(out.data()[1] == Catch::Approx(0.75).margin(1e-12));
    }
    SECTION("rows sum to one and shift invariance") {
        Rng rng(3);
        Tensor x = random_tensor(rng, {4, 7});
        Tensor y = softmax_last_dim(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                s += y.data()[r * 7 + j];
            }
            REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
        }

        std::vector<double> shifted(x.data().begin(), x.data().end());
        for (auto& v : shifted) {
            v += 13.75;
        }
        Tensor y2 = softmax_last_dim(Tensor({4, 7}, shifted));
        for (std::size_t i = 0; i < y.size(); ++i) {
            REQUIRE(y2.data()[i] == Catch::Approx(y.data()[i]).margin(1e-12));
        }
    }
    SECTION("softmax slice results are bit-stable under slice permutation") {
        Rng rng(5);
        const std::size_t d = 9;
        auto xv = oracle::random_values(rng, d);
        std::vector<std::size_t> perm(d);
        for (std::size_t i = 0; i < d; ++i) {
            perm[i] = i;
        }
        Rng shuffler(77);
        shuffler.shuffle(perm);
        std::vector<double> xp(d);
        for (std::size_t i = 0; i < d; ++i) {
            xp[i] = xv[perm[i]];
        }
        Tensor a = softmax_last_dim(Tensor::vec(xv));
        Tensor b = softmax_last_dim(Tensor::vec(xp));
        for (std::size_t i = 0; i < d; ++i) {
            REQUIRE(b.data()[i] == a.data()[perm[i]]);
        }
    }
}

TEST_CASE("layer_norm hand values") {
    Tensor gamma = Tensor::vec({1, 1, 1});
    Tensor beta = Tensor::vec({0, 0, 0});
    SECTION("constant slice maps to zero") {
        Tensor out = layer_norm(Tensor::vec({5, 5, 5}), gamma, beta, 1e-5);
        for (double v : out.data()) {
            REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
        }
    }
    SECTION("already normalized slice is preserved as eps vanishes") {
        Tensor out = layer_norm(Tensor::vec({1, -1}), Tensor::vec({1, 1}), Tensor::vec({0, 0}),
                                1e-12);
        REQUIRE(out.data()[0] == Catch::Approx(1.0).margin(1e-6));
        REQUIRE(out.data()[1] == Catch::Approx(-1.0).margin(1e-6));
    }
    SECTION("zero gain collapses to shift") {
        Rng rng(11);
        Tensor x = random_tensor(rng, {3, 4});
        Tensor out = layer_norm(x, Tensor::zeros({4}), Tensor::vec({1, 2, 3, 4}), 1e-5);
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t j = 0; j < 4; ++j) {
                REQUIRE(out.data()[r * 4 + j] == Catch::Approx(1.0 + j).margin(1e-15));
            }
        }
    }
    SECTION("normalized slices have mean 0 variance 1") {
        Rng rng(12);
        Tensor x = random_tensor(rng, {5, 8});
        Tensor out = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-10);
        for (std::size_t r = 0; r < 5; ++r) {
            double mean = 0.0, var = 0.0;
            for (std::size_t j = 0; j < 8; ++j) {
                mean += out.data()[r * 8 + j];
            }
            mean /= 8.0;
            for (std::size_t j = 0; j < 8; ++j) {
                const double c = out.data()[r * 8 + j] - mean;
                var += c * c;
            }
            var /= 8.0;
            REQUIRE(mean == Catch::Approx(0.0).margin(1e-12));
            REQUIRE(var == Catch::Approx(1.0).margin(1e-6));
        }
    }
    SECTION("affine shape mismatch") {
        REQUIRE_THROWS_AS(layer_norm(Tensor::vec({1, 2, 3}), Tensor::vec({1, 1}), beta, 1e-5),
                          ShapeError);
    }
}

TEST_CASE("mlp_forward hand values") {
    SECTION("zero weights pass bias through") {
        DenseLayer layer{Tensor::zeros({3, 2}), Tensor::vec({0.5, -1.5}), Activation::identity};
        Tensor out = mlp_forward(Tensor::matrix({{1, 2, 3}, {-4, 0, 9}}), {&layer, 1});
        REQUIRE(out.at({0, 0}) == 0.5);
        REQUIRE(out.at({0, 1}) == -1.5);
        REQUIRE(out.at({1, 0}) == 0.5);
        REQUIRE(out.at({1, 1}) == -1.5);
    }
    SECTION("identity weight with relu") {
        DenseLayer layer{Tensor::matrix({{1, 0}, {0, 1}}), Tensor::zeros({2}), Activation::relu};
        Tensor out = mlp_forward(Tensor::row({2, -3}), {&layer, 1});
        REQUIRE(out.data()[0] == 2.0);
        REQUIRE(out.data()[1] == 0.0);
    }
    SECTION("column-sum layer") {
        DenseLayer layer{Tensor::matrix({{1}, {1}}), Tensor::vec({0.5}), Activation::identity};
        Tensor out = mlp_forward(Tensor::row({1, 2}), {&layer, 1});
        REQUIRE(out.item() == 3.5);
    }
    SECTION("dimension chain break names the layer") {
        std::vector<DenseLayer> layers{
            {Tensor::zeros({3, 4}), Tensor::zeros({4}), Activation::relu},
            {Tensor::zeros({5, 2}), Tensor::zeros({2}), Activation::identity},
        };
        REQUIRE_THROWS_MATCHES(mlp_forward(Tensor::zeros({2, 3}), layers), ShapeError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("layer 1")));
    }
    SECTION("rank-3 input applies along the last axis") {
        DenseLayer layer{Tensor::matrix({{2}, {1}}), Tensor::vec({0.0}), Activation::identity};
        Tensor x({2, 2, 2}, {1, 1, 2, 0, 0, 3, 1, 4});
        Tensor out = mlp_forward(x, {&layer, 1});
        REQUIRE(out.shape() == std::vector<std::size_t>{2, 2, 1});
        REQUIRE(out.data()[0] == 3.0);
        REQUIRE(out.data()[1] == 4.0);
        REQUIRE(out.data()[2] == 3.0);
        REQUIRE(out.data()[3] == 6.0);
    }
}

TEST_CASE("backward hand values") {
    SECTION("sum gives all-ones") {
        Tensor x({2, 2}, {1, 2, 3, 4}, true);
        backward(sum(x));
        for (double g : x.grad()) {
            REQUIRE(g == 1.0);
        }
    }
    SECTION("sum of squares") {
        Tensor x = Tensor::vec({1, 2, 3}, true);
        backward(sum(mul(x, x)));
        REQUIRE(x.grad()[0] == Catch::Approx(2.0).margin(1e-14));
        REQUIRE(x.grad()[1] == Catch::Approx(4.0).margin(1e-14));
        REQUIRE(x.grad()[2] == Catch::Approx(6.0).margin(1e-14));
    }
    SECTION("sum of softmax is constant") {
        Tensor x = Tensor::vec({0.3, -1.2, 2.0}, true);
        backward(sum(softmax_last_dim(x)));
        for (double g : x.grad()) {
            REQUIRE(g == Catch::Approx(0.0).margin(1e-12));
        }
    }
    SECTION("leaf off the path keeps a zero gradient") {
        Tensor x = Tensor::vec({1, 2}, true);
        Tensor unused = Tensor::vec({5}, true);
        backward(sum(x));
        REQUIRE(unused.grad()[0] == 0.0);
    }
    SECTION("non-scalar root is rejected") {
        Tensor x = Tensor::vec({1, 2}, true);
        Tensor y = mul(x, x);
        REQUIRE_THROWS_AS(backward(y), ContractError);
    }
    SECTION("gradients accumulate across backward calls until cleared") {
        Tensor x = Tensor::vec({2}, true);
        backward(sum(x));
        backward(sum(x));
        REQUIRE(x.grad()[0] == 2.0);
        x.zero_grad();
        REQUIRE(x.grad()[0] == 0.0);
    }
    SECTION("diamond graph counts both paths") {
        Tensor x = Tensor::scalar(3.0, true);
        Tensor y = add(x, x);  // dy/dx = 2
        backward(sum(y));
        REQUIRE(x.grad()[0] == 2.0);
    }
}

TEST_CASE("tape structure") {
    Tensor x = Tensor::vec({1, 2}, true);
    Tensor y = sum(mul(x, x));
    Tape tape = Tape::record(y);
    // x, mul, sum
    REQUIRE(tape.size() == 3);
    auto nodes = tape.nodes();
    REQUIRE(nodes.front().op.empty());
    REQUIRE(nodes.back().op == "sum");

    SECTION("independent subgraphs backpropagate independently") {
        Tensor a = Tensor::vec({1.5, -0.5}, true);
        Tensor b = Tensor::vec({2.0, 4.0}, true);
        backward(add(sum(mul(a, a)), sum(mul(b, b))));
        std::vector<double> joint_a(a.grad().begin(), a.grad().end());
        std::vector<double> joint_b(b.grad().begin(), b.grad().end());

        Tensor a2 = Tensor::vec({1.5, -0.5}, true);
        Tensor b2 = Tensor::vec({2.0, 4.0}, true);
        backward(sum(mul(a2, a2)));
        backward(sum(mul(b2, b2)));
        for (std::size_t i = 0; i < 2; ++i) {
            REQUIRE(joint_a[i] == a2.grad()[i]);
            REQUIRE(joint_b[i] == b2.grad()[i]);
        }
    }
}

TEST_CASE("elementwise op values") {
    Tensor x = Tensor::vec({-2.0, -0.5, 0.5, 2.0});
    SECTION("smooth_l1") {
        Tensor out = smooth_l1(x);
        REQUIRE(out.data()[0] == Catch::Approx(1.5).margin(1e-15));
        REQUIRE(out.data()[1] == Catch::Approx(0.125).margin(1e-15));
        REQUIRE(out.data()[2] == Catch::Approx(0.125).margin(1e-15));
        REQUIRE(out.data()[3] == Catch::Approx(1.5).margin(1e-15));
    }
    SECTION("clamp") {
        Tensor out = clamp(x, -1.0, 1.0);
        REQUIRE(out.data()[0] == -1.0);
        REQUIRE(out.data()[1] == -0.5);
        REQUIRE(out.data()[3] == 1.0);
        REQUIRE_THROWS_AS(clamp(x, 2.0, 1.0), ContractError);
    }
    SECTION("gelu matches its closed form") {
        Tensor out = gelu(x);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = x.data()[i];
            const double expect = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
            REQUIRE(out.data()[i] == Catch::Approx(expect).margin(1e-15));
        }
    }
    SECTION("exp") {
        Tensor out = exp(Tensor::vec({0.0, 1.0}));
        REQUIRE(out.data()[0] == 1.0);
        REQUIRE(out.data()[1] == Catch::Approx(std::exp(1.0)).margin(1e-15));
    }
    SECTION("arithmetic") {
        Tensor a = Tensor::vec({1, 2});
        Tensor b = Tensor::vec({10, 20});
        REQUIRE(add(a, b).data()[1] == 22.0);
        REQUIRE(sub(a, b).data()[0] == -9.0);
        REQUIRE(mul(a, b).data()[1] == 40.0);
        REQUIRE(neg(a).data()[0] == -1.0);
        REQUIRE(scale(a, 2.5).data()[1] == 5.0);
        REQUIRE(add_scalar(a, 1.0).data()[0] == 2.0);
        REQUIRE_THROWS_AS(add(a, Tensor::vec({1, 2, 3})), ShapeError);
    }
}

TEST_CASE("structural ops") {
    SECTION("transpose") {
        Tensor t = transpose(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
        REQUIRE(t.shape() == std::vector<std::size_t>{3, 2});
        REQUIRE(t.at({2, 1}) == 6.0);
    }
    SECTION("concat and slice round trip") {
        Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
        Tensor b = Tensor::matrix({{5}, {6}});
        Tensor cat = concat_cols({a, b});
        REQUIRE(cat.shape() == std::vector<std::size_t>{2, 3});
        REQUIRE(cat.at({1, 2}) == 6.0);
        Tensor back = slice_cols(cat, 0, 2);
        for (std::size_t i = 0; i < 4; ++i) {
            REQUIRE(back.data()[i] == a.data()[i]);
        }
        REQUIRE_THROWS_AS(slice_cols(cat, 2, 2), ShapeError);
        REQUIRE_THROWS_AS(concat_cols({a, Tensor::matrix({{1, 2}})}), ShapeError);
    }
    SECTION("concat_rows") {
        Tensor cat = concat_rows({Tensor::row({1, 2}), Tensor::row({3, 4})});
        REQUIRE(cat.shape() == std::vector<std::size_t>{2, 2});
        REQUIRE(cat.at({1, 0}) == 3.0);
    }
    SECTION("gather_rows with duplicates") {
        Tensor x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
        Tensor g = gather_rows(x, {2, 0, 2});
        REQUIRE(g.at({0, 0}) == 5.0);
        REQUIRE(g.at({1, 1}) == 2.0);
        REQUIRE_THROWS_AS(gather_rows(x, {3}), ShapeError);
    }
    SECTION("gather_rows backward scatter-adds duplicates") {
        Tensor x = Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}}, true);
        backward(sum(gather_rows(x, {0, 0, 1})));
        REQUIRE(x.grad()[0] == 2.0);
        REQUIRE(x.grad()[2] == 1.0);
    }
    SECTION("cumsum_rows") {
        Tensor out = cumsum_rows(Tensor::matrix({{1, 10}, {2, 20}, {3, 30}}));
        REQUIRE(out.at({0, 0}) == 1.0);
        REQUIRE(out.at({1, 0}) == 3.0);
        REQUIRE(out.at({2, 1}) == 60.0);
    }
    SECTION("reshape preserves data and rejects bad sizes") {
        Tensor x = Tensor::vec({1, 2, 3, 4});
        Tensor r = reshape(x, {2, 2});
        REQUIRE(r.at({1, 0}) == 3.0);
        REQUIRE_THROWS_AS(reshape(x, {3, 2}), ShapeError);
    }
    SECTION("bias_add broadcasts over rows") {
        Tensor out = bias_add(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::vec({10, 20}));
        REQUIRE(out.at({0, 1}) == 22.0);
        REQUIRE(out.at({1, 0}) == 13.0);
        REQUIRE_THROWS_AS(bias_add(Tensor::matrix({{1, 2}}), Tensor::vec({1, 2, 3})), ShapeError);
    }
    SECTION("stack_scalars") {
        Tensor a = Tensor::scalar(1.0, true);
        Tensor b = Tensor::scalar(2.0, true);
        Tensor stacked = stack_scalars(std::vector<Tensor>{a, b});
        REQUIRE(stacked.shape() == std::vector<std::size_t>{2});
        backward(scale(sum(stacked), 3.0));
        REQUIRE(a.grad()[0] == 3.0);
        REQUIRE(b.grad()[0] == 3.0);
    }
}

TEST_CASE("sum_stable is permutation bit-stable") {
    Rng rng(21);
    auto values = oracle::random_values(rng, 64, -10.0, 10.0);
    Tensor base = sum_stable(Tensor({64}, values));

    std::vector<double> shuffled = values;
    Rng shuffler(3);
    shuffler.shuffle(shuffled);
    Tensor perm = sum_stable(Tensor({64}, shuffled));
    REQUIRE(base.item() == perm.item());

    // Plain sum generally differs in the last bits for this size; the point of
    // sum_stable is that the sorted order removes that dependence.
    Tensor s = sum(Tensor({64}, values));
    REQUIRE(base.item() == Catch::Approx(s.item()).margin(1e-9));
}

TEST_CASE("forward ops keep finite inputs finite") {
    Rng rng(31);
    Tensor x = random_tensor(rng, {3, 4, 4});
    for (const Tensor& out :
         {relu(x), gelu(x), exp(x), clamp(x, -1.0, 1.0), smooth_l1(x), softmax_last_dim(x)}) {
        for (double v : out.data()) {
            REQUIRE(std::isfinite(v));
        }
    }
}
