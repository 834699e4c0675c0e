#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "mtx/error.hpp"
#include "mtx/feedback.hpp"
#include "mtx/rng.hpp"
#include "testutil.hpp"

using namespace mtx;
using testutil::grad_check;

namespace {

Tensor labels_for(int l, Rng& rng) {
    std::vector<real> y(static_cast<size_t>(l));
    for (real& v : y) v = rng.uniform() < 0.5 ? real(0) : real(1);
    return Tensor::from({l}, std::move(y));
}

}  // namespace

TEST_CASE("head names parse both ways") {
    CHECK(feedback_from_str("word") == FeedbackHead::kWord);
    CHECK(feedback_from_str("tad") == FeedbackHead::kTad);
    CHECK(feedback_from_str("cd") == FeedbackHead::kCd);
    CHECK(feedback_from_str("none") == FeedbackHead::kNone);
    CHECK_THROWS_AS(feedback_from_str("wgan"), ConfigError);
    for (FeedbackHead h : {FeedbackHead::kWord, FeedbackHead::kTad, FeedbackHead::kCd, FeedbackHead::kNone})
        CHECK(feedback_from_str(feedback_str(h)) == h);
}

TEST_CASE("word chain matches the loop oracle across many instances") {
    Rng rng(314);
    for (int trial = 0; trial < 60; ++trial) {
        const int c = 1 + rng.uniform_int(8);
        const int l = 1 + rng.uniform_int(8);
        const int r = 1 + rng.uniform_int(16);
        Tensor words = Tensor::randn({c, l}, rng);
        Tensor regions = Tensor::randn({c, r}, rng);
        Tensor labels = labels_for(l, rng);

        const auto want = testutil::feedback_oracle({words.data().begin(), words.data().end()},
                                                    {regions.data().begin(), regions.data().end()},
                                                    {labels.data().begin(), labels.data().end()}, c, l, r);

        AttentionMaps maps = normalize_attention(correlate(words, regions));
        REQUIRE(maps.alpha.shape() == Shape{l, r});
        REQUIRE(maps.beta.shape() == Shape{l, r});
        CHECK(testutil::max_abs_diff(maps.alpha, Tensor::from({l, r}, want.alpha)) <= 1e-10);
        CHECK(testutil::max_abs_diff(maps.beta, Tensor::from({l, r}, want.beta)) <= 1e-10);

        Tensor presence = word_presence(regions, maps.beta);
        REQUIRE(presence.shape() == Shape{l});
        CHECK(testutil::max_abs_diff(presence, Tensor::from({l}, want.delta)) <= 1e-10);

        CHECK(std::abs(word_level_loss(regions, words, labels).item() - want.loss) <= 1e-10);
    }
}

TEST_CASE("attention maps stay stochastic even at huge magnitudes") {
    Rng rng(99);
    for (real scale : {real(1), real(1e4)}) {
        Tensor corr = Tensor::uniform({5, 7}, rng, -scale, scale);
        AttentionMaps maps = normalize_attention(corr);
        for (int j = 0; j < 7; ++j) {
            real colsum = 0;
            for (int i = 0; i < 5; ++i) {
                const real v = maps.alpha.at({i, j});
                CHECK(v >= 0);
                CHECK(std::isfinite(v));
                colsum += v;
            }
            CHECK(std::abs(colsum - 1) <= 1e-12);
        }
        for (int i = 0; i < 5; ++i) {
            real rowsum = 0;
            for (int j = 0; j < 7; ++j) {
                const real v = maps.beta.at({i, j});
                CHECK(v >= 0);
                CHECK(std::isfinite(v));
                rowsum += v;
            }
            CHECK(std::abs(rowsum - 1) <= 1e-12);
        }
    }

    // presence is a distribution over words
    Tensor words = Tensor::uniform({6, 4}, rng, -1e4, 1e4);
    Tensor regions = Tensor::uniform({6, 9}, rng, -1e4, 1e4);
    AttentionMaps maps = normalize_attention(correlate(words, regions));
    Tensor presence = word_presence(regions, maps.beta);
    real total = 0;
    for (real v : presence.data()) {
        CHECK(v >= 0);
        CHECK(std::isfinite(v));
        total += v;
    }
    CHECK(std::abs(total - 1) <= 1e-12);
}

TEST_CASE("disabled head contributes an exact zero") {
    Rng rng(4);
    Tensor words = Tensor::randn({4, 3}, rng);
    Tensor regions = Tensor::randn({4, 5}, rng);
    Tensor labels = labels_for(3, rng);
    Tensor z = feedback_loss(FeedbackHead::kNone, regions, words, labels);
    CHECK(z.item() == 0);
    CHECK(z.rank() == 0);
    CHECK(!z.requires_grad());

    CHECK(feedback_loss(FeedbackHead::kWord, regions, words, labels).item() ==
          word_level_loss(regions, words, labels).item());
    CHECK(feedback_loss(FeedbackHead::kTad, regions, words, labels).item() ==
          tad_loss(regions, words, labels).item());
    CHECK(feedback_loss(FeedbackHead::kCd, regions, words, labels).item() ==
          cd_loss(regions, words, labels).item());
}

TEST_CASE("every head is finite and differentiable") {
    Rng rng(2718);
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng r(seed);
        Tensor words = Tensor::randn({5, 4}, r);
        Tensor regions = Tensor::randn({5, 6}, r);
        Tensor labels = labels_for(4, r);
        Tensor zeros = Tensor::zeros({4});

        for (FeedbackHead head : {FeedbackHead::kWord, FeedbackHead::kTad, FeedbackHead::kCd}) {
            for (const Tensor& y : {labels, zeros}) {
                const real v = feedback_loss(head, regions, words, y).item();
                CHECK(std::isfinite(v));
                CHECK(v >= 0);
                CHECK(grad_check([&](const Tensor& x) { return feedback_loss(head, x, words, y); },
                                 regions) < 1e-4);
                CHECK(grad_check([&](const Tensor& x) { return feedback_loss(head, regions, x, y); },
                                 words) < 1e-4);
            }
        }
    }
    (void)rng;
}

TEST_CASE("mismatched shapes are rejected") {
    Tensor words = Tensor::zeros({4, 3});
    Tensor regions = Tensor::zeros({5, 6});
    CHECK_THROWS_AS((void)correlate(words, regions), DimError);
    CHECK_THROWS_AS((void)word_level_loss(Tensor::zeros({4, 6}), words, Tensor::zeros({2})), DimError);
}
