#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mtx/error.hpp"
#include "mtx/rng.hpp"
#include "mtx/tensor.hpp"
#include "testutil.hpp"

using namespace mtx;
using testutil::grad_check;
using testutil::max_abs_diff;
using testutil::rel_err;

namespace {

Tensor weighted(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

}  // namespace

TEST_CASE("elementwise ops and rank-0 broadcast") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {10, 20, 30, 40});
    CHECK(max_abs_diff(a + b, Tensor::from({2, 2}, {11, 22, 33, 44})) == 0);
    CHECK(max_abs_diff(b - a, Tensor::from({2, 2}, {9, 18, 27, 36})) == 0);
    CHECK(max_abs_diff(a * b, Tensor::from({2, 2}, {10, 40, 90, 160})) == 0);
    CHECK(max_abs_diff(a + 1.5, Tensor::from({2, 2}, {2.5, 3.5, 4.5, 5.5})) == 0);
    CHECK(max_abs_diff(a * 2.0, Tensor::from({2, 2}, {2, 4, 6, 8})) == 0);
    Tensor s = Tensor::scalar(3);
    CHECK(max_abs_diff(a + s, Tensor::from({2, 2}, {4, 5, 6, 7})) == 0);
    CHECK(max_abs_diff(s * a, Tensor::from({2, 2}, {3, 6, 9, 12})) == 0);
}

TEST_CASE("shape violations raise DimError") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS((void)add(a, b), DimError);
    CHECK_THROWS_AS((void)mul(a, Tensor::zeros({2, 2})), DimError);
    CHECK_THROWS_AS((void)matmul(a, Tensor::zeros({2, 2})), DimError);
    CHECK_THROWS_AS((void)matmul(a, Tensor::zeros({2})), DimError);
    CHECK_THROWS_AS((void)reshape(a, {4, 2}), DimError);
    CHECK_THROWS_AS((void)concat({a, b}, 0), DimError);
    CHECK_THROWS_AS((void)conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 1, 3, 3}), Tensor(), 1, 1),
                    DimError);
    CHECK_THROWS_AS((void)conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({3, 2, 3, 3}), Tensor::zeros({2}), 1, 1),
                    DimError);
}

TEST_CASE("matmul matches the loop oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 25; ++trial) {
        const int m = 1 + rng.uniform_int(6);
        const int k = 1 + rng.uniform_int(6);
        const int n = 1 + rng.uniform_int(6);
        Tensor a = Tensor::randn({m, k}, rng);
        Tensor b = Tensor::randn({k, n}, rng);
        Tensor c = matmul(a, b);
        REQUIRE(c.shape() == Shape{m, n});
        const auto want = testutil::matmul_oracle({a.data().begin(), a.data().end()},
                                                  {b.data().begin(), b.data().end()}, m, k, n);
        CHECK(max_abs_diff(c, Tensor::from({m, n}, want)) <= 1e-12);

        Tensor v = Tensor::randn({k}, rng);
        Tensor av = matmul(a, v);
        REQUIRE(av.shape() == Shape{m});
        const auto wantv = testutil::matmul_oracle({a.data().begin(), a.data().end()},
                                                   {v.data().begin(), v.data().end()}, m, k, 1);
        CHECK(max_abs_diff(av, Tensor::from({m}, wantv)) <= 1e-12);
    }
}

TEST_CASE("transpose, reshape, concat, stack_cols move values where expected") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a);
    REQUIRE(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 1}) == 4);
    CHECK(t.at({2, 0}) == 3);

    Tensor r = reshape(a, {3, 2});
    CHECK(r.at({1, 0}) == 3);
    CHECK(r.at({2, 1}) == 6);

    Tensor c0 = concat({a, a}, 0);
    REQUIRE(c0.shape() == Shape{4, 3});
    CHECK(c0.at({2, 0}) == 1);
    Tensor c1 = concat({a, a}, 1);
    REQUIRE(c1.shape() == Shape{2, 6});
    CHECK(c1.at({0, 3}) == 1);
    CHECK(c1.at({1, 5}) == 6);

    Tensor x = Tensor::from({2}, {1, 2});
    Tensor y = Tensor::from({2}, {3, 4});
    Tensor s = stack_cols({x, y});
    REQUIRE(s.shape() == Shape{2, 2});
    CHECK(s.at({0, 1}) == 3);
    CHECK(s.at({1, 0}) == 2);
}

TEST_CASE("softmax slices are stochastic even at huge magnitudes") {
    Rng rng(7);
    for (real scale : {real(1), real(1e4)}) {
        Tensor x = Tensor::uniform({5, 4}, rng, -scale, scale);
        for (int axis : {0, 1}) {
            Tensor p = softmax(x, axis);
            Tensor sums = sum(p, axis);
            for (real s : sums.data()) CHECK(std::abs(s - 1) <= 1e-12);
            for (real v : p.data()) {
                CHECK(std::isfinite(v));
                CHECK(v >= 0);
            }
        }
    }
    // small magnitudes also agree with the unshifted formula
    Tensor x = Tensor::uniform({6}, rng, -2, 2);
    Tensor p = softmax(x, 0);
    real denom = 0;
    for (real v : x.data()) denom += std::exp(v);
    for (size_t i = 0; i < 6; ++i)
        CHECK(std::abs(p.data()[i] - std::exp(x.data()[i]) / denom) <= 1e-12);
}

TEST_CASE("bce anchors and clamping") {
    Tensor pred = Tensor::from({2}, {0.5, 0.5});
    Tensor target = Tensor::from({2}, {1, 0});
    CHECK(std::abs(bce(pred, target).item() - std::log(real(2))) <= 1e-12);

    // saturated predictions stay finite through the clamp
    Tensor sat = Tensor::from({2}, {0, 1});
    Tensor y = Tensor::from({2}, {1, 0});
    const real loss = bce(sat, y).item();
    CHECK(std::isfinite(loss));
    CHECK(std::abs(loss + std::log(real(1e-7))) <= 1e-9);

    // symmetric under flipping predictions and targets together
    Rng rng(3);
    Tensor p = Tensor::uniform({5}, rng, 0.05, 0.95);
    Tensor t = Tensor::from({5}, {1, 0, 1, 1, 0});
    Tensor pf = 1.0 + (p * real(-1));
    Tensor tf = 1.0 + (t * real(-1));
    CHECK(std::abs(bce(p, t).item() - bce(pf, tf).item()) <= 1e-12);
}

TEST_CASE("l2_normalize yields unit slices across magnitudes") {
    Rng rng(11);
    for (real scale : {real(1), real(1e4), real(1e-4)}) {
        Tensor x = Tensor::uniform({4, 6}, rng, -scale, scale);
        for (int axis : {0, 1}) {
            Tensor n = l2_normalize(x, axis);
            Tensor sq = sum(mul(n, n), axis);
            for (real s : sq.data()) CHECK(std::abs(std::sqrt(s) - 1) <= 1e-12);
        }
    }
    // slices below the floor are divided by the floor instead
    Tensor tiny = Tensor::from({2}, {1e-15, 0});
    Tensor n = l2_normalize(tiny, 0);
    CHECK(std::abs(n.data()[0] - 1e-15 / 1e-12) <= 1e-24);
    CHECK(n.data()[1] == 0);
}

TEST_CASE("conv2d matches the loop oracle across geometries") {
    struct Cfg {
        int ci, h, w, co, kh, kw, stride, pad;
    };
    const Cfg cfgs[] = {
        {3, 8, 8, 4, 3, 3, 1, 1}, {2, 7, 5, 3, 3, 3, 2, 1}, {4, 4, 4, 2, 1, 1, 1, 0},
        {1, 9, 9, 2, 5, 5, 1, 2}, {2, 6, 8, 3, 3, 5, 1, 2}, {3, 5, 5, 2, 4, 4, 2, 1},
        {1, 2, 2, 1, 3, 3, 1, 1}, {2, 32, 32, 4, 3, 3, 2, 1},
    };
    Rng rng(99);
    for (const auto& cfg : cfgs) {
        for (bool with_bias : {true, false}) {
            Tensor x = Tensor::randn({cfg.ci, cfg.h, cfg.w}, rng);
            Tensor k = Tensor::randn({cfg.co, cfg.ci, cfg.kh, cfg.kw}, rng);
            Tensor b = with_bias ? Tensor::randn({cfg.co}, rng) : Tensor();
            Tensor out = conv2d(x, k, b, cfg.stride, cfg.pad);
            const int ho = (cfg.h + 2 * cfg.pad - cfg.kh) / cfg.stride + 1;
            const int wo = (cfg.w + 2 * cfg.pad - cfg.kw) / cfg.stride + 1;
            REQUIRE(out.shape() == Shape{cfg.co, ho, wo});
            const auto want = testutil::conv2d_oracle(
                {x.data().begin(), x.data().end()}, {k.data().begin(), k.data().end()},
                with_bias ? std::vector<real>{b.data().begin(), b.data().end()} : std::vector<real>{},
                cfg.ci, cfg.h, cfg.w, cfg.co, cfg.kh, cfg.kw, cfg.stride, cfg.pad);
            CHECK(max_abs_diff(out, Tensor::from({cfg.co, ho, wo}, want)) <= 1e-12);
        }
    }
}

TEST_CASE("upsample_nearest2x repeats each pixel into a 2x2 block") {
    Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    Tensor u = upsample_nearest2x(x);
    REQUIRE(u.shape() == Shape{1, 4, 4});
    CHECK(max_abs_diff(u, Tensor::from({1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4})) == 0);
}

TEST_CASE("embedding_row picks rows and routes gradients into them") {
    Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    table.set_requires_grad(true);
    Tensor row = embedding_row(table, 2);
    REQUIRE(row.shape() == Shape{2});
    CHECK(row.at({0}) == 5);
    backward(sum(row * 2.0));
    const auto g = table.grad();
    CHECK(g[0] == 0);
    CHECK(g[4] == 2);
    CHECK(g[5] == 2);
    CHECK_THROWS_AS((void)embedding_row(table, 3), DimError);
}

TEST_CASE("tile_spatial broadcasts a channel vector over the grid") {
    Tensor v = Tensor::from({2}, {3, 7});
    Tensor t = tile_spatial(v, 2, 3);
    REQUIRE(t.shape() == Shape{2, 2, 3});
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x) {
            CHECK(t.at({0, y, x}) == 3);
            CHECK(t.at({1, y, x}) == 7);
        }
}

TEST_CASE("backward accumulates leaf grads and consumes the graph") {
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor loss = sum(x * x);
    backward(loss);
    CHECK(x.grad()[0] == 2);
    CHECK(x.grad()[1] == 4);
    CHECK_THROWS_AS(backward(loss), StateError);

    backward(sum(x * 3.0));  // fresh graph accumulates on top
    CHECK(x.grad()[0] == 5);
    CHECK(x.grad()[1] == 7);

    x.zero_grad();
    CHECK(x.grad()[0] == 0);

    CHECK_THROWS_AS(backward(x), StateError);  // non-scalar root
}

TEST_CASE("detach blocks gradient flow") {
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor d = x.detach();
    CHECK(!d.requires_grad());
    backward(sum(x * x + d));
    CHECK(x.grad()[0] == 2);
    CHECK(x.grad()[1] == 4);
}

TEST_CASE("gradients match central differences") {
    Rng rng(1234);
    const Tensor w23 = Tensor::uniform({2, 3}, rng, -1, 1);
    const Tensor w32 = Tensor::uniform({3, 2}, rng, -1, 1);
    const Tensor w3 = Tensor::uniform({3}, rng, -1, 1);

    for (uint64_t seed = 1; seed <= 3; ++seed) {
        Rng r(seed);
        Tensor a = Tensor::randn({2, 3}, r);
        Tensor b = Tensor::randn({2, 3}, r);
        Tensor m = Tensor::randn({3, 2}, r);

        CHECK(grad_check([&](const Tensor& t) { return weighted(t + b, w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(b - t, w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(t * b, w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(t + 0.7, w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(t * -1.3, w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(matmul(t, m) * Tensor::ones({2, 2})); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(matmul(a, t) * Tensor::ones({2, 2})); }, m) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(matmul(t, w3) * Tensor::ones({2})); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(transpose(t), w32); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(reshape(t, {3, 2}), w32); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(concat({t, b}, 0) * Tensor::ones({4, 3})); }, a) < 1e-4);

        Tensor col = Tensor::randn({3}, r);
        CHECK(grad_check([&](const Tensor& t) { return sum(stack_cols({t, col}) * Tensor::ones({3, 2})); },
                         col) < 1e-4);

        Tensor pos = Tensor::uniform({2, 3}, r, 0.2, 2.0);
        Tensor kinked = testutil::away_from_zero({2, 3}, r);
        CHECK(grad_check([&](const Tensor& t) { return weighted(relu(t), w23); }, kinked) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(leaky_relu(t, 0.2), w23); }, kinked) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(sigmoid(t), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(mtx::tanh(t), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(mtx::exp(t), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(mtx::log(t), w23); }, pos) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(t); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(sum(t, 0) * w3); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return sum(sum(t, 1) * Tensor::ones({2})); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return mean(t); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(softmax(t, 0), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(softmax(t, 1), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(l2_normalize(t, 0), w23); }, a) < 1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(l2_normalize(t, 1), w23); }, a) < 1e-4);

        Tensor prob = Tensor::uniform({4}, r, 0.1, 0.9);
        Tensor lab = Tensor::from({4}, {1, 0, 0, 1});
        CHECK(grad_check([&](const Tensor& t) { return bce(t, lab); }, prob) < 1e-4);

        Tensor img = Tensor::randn({2, 5, 5}, r);
        Tensor ker = Tensor::randn({3, 2, 3, 3}, r);
        Tensor bias = Tensor::randn({3}, r);
        const Tensor wout = Tensor::uniform({3, 5, 5}, r, -1, 1);
        CHECK(grad_check([&](const Tensor& t) { return weighted(conv2d(t, ker, bias, 1, 1), wout); }, img) <
              1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(conv2d(img, t, bias, 1, 1), wout); }, ker) <
              1e-4);
        CHECK(grad_check([&](const Tensor& t) { return weighted(conv2d(img, ker, t, 1, 1), wout); }, bias) <
              1e-4);
        const Tensor wds = Tensor::uniform({3, 3, 3}, r, -1, 1);
        CHECK(grad_check([&](const Tensor& t) { return weighted(conv2d(t, ker, bias, 2, 1), wds); }, img) <
              1e-4);
        const Tensor wup = Tensor::uniform({2, 10, 10}, r, -1, 1);
        CHECK(grad_check([&](const Tensor& t) { return weighted(upsample_nearest2x(t), wup); }, img) < 1e-4);

        Tensor table = Tensor::randn({4, 3}, r);
        CHECK(grad_check([&](const Tensor& t) { return sum(embedding_row(t, 1) * w3); }, table) < 1e-4);
        const Tensor wtile = Tensor::uniform({3, 2, 2}, r, -1, 1);
        CHECK(grad_check([&](const Tensor& t) { return weighted(tile_spatial(t, 2, 2), wtile); }, col) < 1e-4);
    }
}
