#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "mtx/data.hpp"
#include "mtx/error.hpp"
#include "mtx/nets.hpp"
#include "mtx/params.hpp"
#include "testutil.hpp"

using namespace mtx;

namespace {

NetDims small_dims(int vocab) {
    NetDims d;
    d.vocab_size = vocab;
    return d;
}

int conv_params(int out_ch, int in_ch, int k) { return out_ch * in_ch * k * k + out_ch; }

std::vector<real> vec(const Tensor& t) { return std::vector<real>(t.data().begin(), t.data().end()); }

// Closed-form size of the adversarially trained generator slice: the
// conditioning augment, the detail encoder, and every fusion / residual /
// modulation / attention / output layer. Frozen text and semantic encoders
// are excluded.
int64_t gen_trainable_formula(const NetDims& d) {
    const int w = d.gen_width;
    const int cat = d.sem_channels[3] + d.ca_dim;
    int64_t n = 0;
    n += 2 * (static_cast<int64_t>(d.ca_dim) * d.text_dim() + d.ca_dim);  // mu and log-sigma affines
    n += conv_params(d.detail_channels[0], 3, 3) + conv_params(d.detail_channels[1], d.detail_channels[0], 3);
    n += conv_params(w, cat, 3) + conv_params(w, cat, 1);
    n += 2 * (2 * conv_params(w, w, 3) + 2 * conv_params(w, w, 1) + 2 * static_cast<int64_t>(w) * d.text_dim() +
              conv_params(w, 2 * w, 1));
    n += 2 * conv_params(w, d.detail_channels[1], 1);
    n += conv_params(16, w, 3) + conv_params(3, 16, 3);
    return n;
}

int64_t disc_formula(const NetDims& d) {
    int64_t n = 0;
    int in = 3;
    for (int c : d.disc_channels) {
        n += conv_params(c, in, 3);
        in = c;
    }
    n += conv_params(in, in, 3) + in + 1;                  // unconditional head
    n += conv_params(in, in + d.text_dim(), 3) + in + 1;   // conditional head
    return n;
}

}  // namespace

TEST_CASE("encoders produce the documented grids") {
    Rng rng(11);
    NetDims dims = small_dims(4);
    SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
    DetailEncoderParams det = DetailEncoderParams::init(dims, rng);
    Tensor img = Tensor::uniform({3, 32, 32}, rng, -1, 1);

    ImageFeatures sf = encode_semantic(img, sem);
    CHECK(sf.height == 4);
    CHECK(sf.width == 4);
    CHECK(sf.v.dim(0) == 64);
    CHECK(sf.v.dim(1) == 16);

    ImageFeatures df = encode_detail(img, det);
    CHECK(df.height == 8);
    CHECK(df.width == 8);
    CHECK(df.v.dim(0) == 16);

    Tensor pooled = pooled_features(sf);
    CHECK(pooled.rank() == 1);
    CHECK(pooled.dim(0) == 64);
    for (int c = 0; c < 4; ++c) {
        real want = 0;
        for (int r = 0; r < 16; ++r) want += sf.v.data()[c * 16 + r];
        CHECK(testutil::rel_err(pooled.data()[c], want / 16) <= 1e-12);
    }

    Tensor big = Tensor::uniform({3, 64, 64}, rng, -1, 1);
    ImageFeatures sf2 = encode_semantic(big, sem);
    CHECK(sf2.height == 8);
    CHECK(sf2.v.dim(1) == 64);

    CHECK_THROWS_AS(encode_semantic(Tensor::zeros({3, 12, 12}), sem), DimError);
    CHECK_THROWS_AS(encode_semantic(Tensor::zeros({1, 32, 32}), sem), DimError);
    CHECK_THROWS_AS(encode_semantic(Tensor::zeros({3, 32, 16}), sem), DimError);
    CHECK_THROWS_AS(encode_detail(Tensor::zeros({3, 6, 6}), det), DimError);
}

TEST_CASE("detail activations expose both conv blocks") {
    Rng rng(12);
    DetailEncoderParams det = DetailEncoderParams::init(small_dims(4), rng);
    Tensor img = Tensor::uniform({3, 32, 32}, rng, -1, 1);

    Tensor a1 = detail_activation(img, det, 1);
    CHECK(a1.dim(0) == 8);
    CHECK(a1.dim(1) == 16);
    Tensor a2 = detail_activation(img, det, 2);
    ImageFeatures df = encode_detail(img, det);
    CHECK(testutil::bitwise_equal(reshape(a2, {16, 64}), df.v));

    CHECK_THROWS_AS(detail_activation(img, det, 0), ConfigError);
    CHECK_THROWS_AS(detail_activation(img, det, 3), ConfigError);
}

TEST_CASE("affine modulation matches its per-pixel formula") {
    Rng rng(13);
    const int c = 5, h = 3, w = 4, cc = 6;
    Tensor hidden = Tensor::uniform({c, h, w}, rng, -1, 1);
    Tensor cond = Tensor::uniform({cc, h, w}, rng, -1, 1);
    ConvLayer wh = conv_layer_init(c, cc, 1, rng);
    ConvLayer bh = conv_layer_init(c, cc, 1, rng);

    Tensor got = acm(hidden, cond, wh, bh);
    std::vector<real> scale = testutil::conv2d_oracle(vec(cond), vec(wh.kernel), vec(wh.bias), cc, h, w, c, 1, 1, 1, 0);
    std::vector<real> shift = testutil::conv2d_oracle(vec(cond), vec(bh.kernel), vec(bh.bias), cc, h, w, c, 1, 1, 1, 0);
    for (int i = 0; i < c * h * w; ++i) {
        real want = hidden.data()[i] * scale[i] + shift[i];
        CHECK(testutil::rel_err(got.data()[i], want) <= 1e-12);
    }

    SUBCASE("unit heads leave the grid untouched") {
        ConvLayer one{Tensor::zeros({c, cc, 1, 1}), Tensor::ones({c})};
        ConvLayer zero{Tensor::zeros({c, cc, 1, 1}), Tensor::zeros({c})};
        CHECK(testutil::bitwise_equal(acm(hidden, cond, one, zero), hidden));
    }

    SUBCASE("shape violations") {
        CHECK_THROWS_AS(acm(reshape(hidden, {c, h * w}), cond, wh, bh), DimError);
        CHECK_THROWS_AS(acm(hidden, Tensor::zeros({cc, h + 1, w}), wh, bh), DimError);
        ConvLayer wrong = conv_layer_init(c + 1, cc, 1, rng);
        CHECK_THROWS_AS(acm(hidden, cond, wrong, wrong), DimError);
    }
}

TEST_CASE("spatial attention is row-stochastic and matches a loop oracle") {
    Rng rng(14);
    const int c = 4, h = 2, w = 3, r = h * w, td = 6, l = 5;
    for (int trial = 0; trial < 8; ++trial) {
        Tensor hidden = Tensor::uniform({c, h, w}, rng, -1, 1);
        Tensor words = Tensor::uniform({td, l}, rng, -1, 1);
        Tensor proj = Tensor::uniform({c, td}, rng, -1, 1);
        SpatialAttnResult res = spatial_attention(hidden, words, proj);
        CHECK(res.context.dim(0) == c);
        CHECK(res.weights.dim(0) == r);
        CHECK(res.weights.dim(1) == l);

        std::vector<real> pw = testutil::matmul_oracle(vec(proj), vec(words), c, td, l);
        std::vector<real> ctx(c * r, 0);
        for (int i = 0; i < r; ++i) {
            std::vector<real> e(l);
            real tot = 0;
            for (int j = 0; j < l; ++j) {
                real s = 0;
                for (int k = 0; k < c; ++k) s += hidden.data()[k * r + i] * pw[k * l + j];
                e[j] = std::exp(s);
                tot += e[j];
            }
            real row = 0;
            for (int j = 0; j < l; ++j) {
                real a = e[j] / tot;
                row += res.weights.data()[i * l + j];
                CHECK(testutil::rel_err(res.weights.data()[i * l + j], a) <= 1e-10);
                for (int k = 0; k < c; ++k) ctx[k * r + i] += a * pw[k * l + j];
            }
            CHECK(std::abs(row - 1) <= 1e-12);
        }
        for (int i = 0; i < c * r; ++i) CHECK(testutil::rel_err(res.context.data()[i], ctx[i]) <= 1e-10);
    }

    SUBCASE("gradients") {
        Tensor hidden = Tensor::uniform({c, h, w}, rng, -1, 1);
        Tensor words = Tensor::uniform({td, l}, rng, -1, 1);
        Tensor proj = Tensor::uniform({c, td}, rng, -1, 1);
        Tensor wt = Tensor::uniform({c, h, w}, rng, -1, 1);
        auto score = [&](const Tensor& ctx) { return sum(mul(ctx, wt)); };
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(spatial_attention(x, words, proj).context); },
                                   hidden) <= 1e-4);
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(spatial_attention(hidden, x, proj).context); },
                                   words) <= 1e-4);
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(spatial_attention(hidden, words, x).context); },
                                   proj) <= 1e-4);
    }

    SUBCASE("shape violations") {
        CHECK_THROWS_AS(spatial_attention(Tensor::zeros({c, r}), Tensor::zeros({td, l}), Tensor::zeros({c, td})),
                        DimError);
        CHECK_THROWS_AS(spatial_attention(Tensor::zeros({c, h, w}), Tensor::zeros({td + 1, l}), Tensor::zeros({c, td})),
                        DimError);
        CHECK_THROWS_AS(spatial_attention(Tensor::zeros({c, h, w}), Tensor::zeros({td, l}), Tensor::zeros({c + 2, td})),
                        DimError);
    }
}

TEST_CASE("channel attention gates channels by attended word content") {
    Rng rng(15);
    const int c = 4, h = 3, w = 2, r = h * w, td = 5, l = 6;
    for (int trial = 0; trial < 8; ++trial) {
        Tensor hidden = Tensor::uniform({c, h, w}, rng, -1, 1);
        Tensor words = Tensor::uniform({td, l}, rng, -1, 1);
        Tensor proj = Tensor::uniform({c, td}, rng, -1, 1);
        ChannelAttnResult res = channel_attention(hidden, words, proj);
        CHECK(res.weights.dim(0) == c);
        CHECK(res.weights.dim(1) == l);

        std::vector<real> pw = testutil::matmul_oracle(vec(proj), vec(words), c, td, l);
        for (int k = 0; k < c; ++k) {
            real desc = 0;
            for (int i = 0; i < r; ++i) desc += hidden.data()[k * r + i];
            desc /= r;
            std::vector<real> e(l);
            real tot = 0;
            for (int j = 0; j < l; ++j) {
                e[j] = std::exp(desc * pw[k * l + j]);
                tot += e[j];
            }
            real content = 0, row = 0;
            for (int j = 0; j < l; ++j) {
                real a = e[j] / tot;
                row += res.weights.data()[k * l + j];
                CHECK(testutil::rel_err(res.weights.data()[k * l + j], a) <= 1e-10);
                content += a * pw[k * l + j];
            }
            CHECK(std::abs(row - 1) <= 1e-12);
            real gate = 1 / (1 + std::exp(-content));
            for (int i = 0; i < r; ++i)
                CHECK(testutil::rel_err(res.gated.data()[k * r + i], hidden.data()[k * r + i] * gate) <= 1e-10);
        }
    }

    SUBCASE("gradients") {
        Tensor hidden = Tensor::uniform({c, h, w}, rng, -1, 1);
        Tensor words = Tensor::uniform({td, l}, rng, -1, 1);
        Tensor proj = Tensor::uniform({c, td}, rng, -1, 1);
        Tensor wt = Tensor::uniform({c, h, w}, rng, -1, 1);
        auto score = [&](const Tensor& g) { return sum(mul(g, wt)); };
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(channel_attention(x, words, proj).gated); },
                                   hidden) <= 1e-4);
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(channel_attention(hidden, x, proj).gated); },
                                   words) <= 1e-4);
        CHECK(testutil::grad_check([&](const Tensor& x) { return score(channel_attention(hidden, words, x).gated); },
                                   proj) <= 1e-4);
    }
}

TEST_CASE("generator emits a bounded image and stagewise attention maps") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims = small_dims(vocab.size());
    Rng init(21);
    GeneratorParams gen = GeneratorParams::init(dims, init);
    TokenSeq tokens = tokenize("a red circle on a blue background", vocab);
    Rng rng(7);
    Tensor img = render(SceneSpec{ShapeKind::kCircle, 2, 0, 16, 16, 7}, 32);

    GenResult out = generate_full(img, tokens, gen, rng);
    CHECK(out.image.rank() == 3);
    CHECK(out.image.dim(0) == 3);
    CHECK(out.image.dim(1) == 32);
    CHECK(out.image.dim(2) == 32);
    for (size_t i = 0; i < out.image.numel(); ++i) CHECK(std::abs(out.image.data()[i]) < 1);

    REQUIRE(out.attention.size() == 2);
    CHECK(out.attention[0].dim(0) == 16);
    CHECK(out.attention[1].dim(0) == 64);
    for (const Tensor& a : out.attention) {
        CHECK(a.dim(1) == tokens.length());
        for (int i = 0; i < a.dim(0); ++i) {
            real row = 0;
            for (int j = 0; j < a.dim(1); ++j) row += a.data()[i * a.dim(1) + j];
            CHECK(std::abs(row - 1) <= 1e-12);
        }
    }
    CHECK(out.ca_mu.dim(0) == dims.ca_dim);
    CHECK(out.ca_log_sigma.dim(0) == dims.ca_dim);

    SUBCASE("same seed reproduces the image bitwise") {
        Rng a(99), b(99);
        CHECK(testutil::bitwise_equal(generate(img, tokens, gen, a), generate(img, tokens, gen, b)));
    }
    SUBCASE("deterministic mode ignores the sampler") {
        Rng a(1), b(2);
        GenOptions det;
        det.deterministic = true;
        CHECK(testutil::bitwise_equal(generate(img, tokens, gen, a, det), generate(img, tokens, gen, b, det)));
    }
    SUBCASE("test modes still produce valid images") {
        GenOptions opt;
        opt.acm_identity = true;
        opt.bypass_attention = true;
        Rng a(3);
        GenResult plain = generate_full(img, tokens, gen, a, opt);
        CHECK(plain.attention.empty());
        CHECK(plain.image.dim(1) == 32);
    }
}

TEST_CASE("discriminator heads score in the open unit interval") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims = small_dims(vocab.size());
    Rng rng(31);
    DiscriminatorParams disc = DiscriminatorParams::init(dims, rng);
    TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
    Tensor img = render(SceneSpec{ShapeKind::kSquare, 0, 2, 10, 22, 5}, 32);
    TextFeatures tf = encode_text(tokenize("the square is red and the background is blue", vocab), text);

    Tensor u = discriminate(img, disc);
    CHECK(u.rank() == 0);
    CHECK(u.item() > 0);
    CHECK(u.item() < 1);

    Tensor c = discriminate(img, &tf.sentence, disc);
    CHECK(c.rank() == 0);
    CHECK(c.item() > 0);
    CHECK(c.item() < 1);

    CHECK_THROWS_AS(discriminate(img, nullptr, disc), StateError);
    Tensor bad = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(discriminate(img, &bad, disc), DimError);
    CHECK_THROWS_AS(discriminate(Tensor::zeros({3, 20, 20}), disc), DimError);
}

TEST_CASE("parameter registries are unique, complete and the documented size") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims = small_dims(vocab.size());
    Rng rng(41);
    GeneratorParams gen = GeneratorParams::init(dims, rng);
    DiscriminatorParams disc = DiscriminatorParams::init(dims, rng);

    NamedParams gt = gen.trainable();
    NamedParams ga = gen.all();
    NamedParams dt = disc.trainable();

    std::set<std::string> names;
    for (const NamedTensor& p : ga) names.insert(p.name);
    CHECK(names.size() == ga.size());
    CHECK(ga.size() > gt.size());

    CHECK(param_count(gt) == gen_trainable_formula(dims));
    CHECK(param_count(gt) == 96051);
    CHECK(param_count(gt) < 1000000);
    CHECK(param_count(dt) == disc_formula(dims));
    CHECK(param_count(dt) == 43026);

    SUBCASE("frozen slice is the text and semantic encoders") {
        int64_t frozen = param_count(ga) - param_count(gt);
        int64_t text = static_cast<int64_t>(dims.vocab_size) * dims.embed_dim +
                       2 * 3 * (static_cast<int64_t>(dims.gru_hidden) * dims.embed_dim +
                                static_cast<int64_t>(dims.gru_hidden) * dims.gru_hidden + dims.gru_hidden);
        int64_t sem = conv_params(8, 3, 3) + conv_params(16, 8, 3) + conv_params(32, 16, 3) + conv_params(64, 32, 3);
        CHECK(frozen == text + sem);
    }
}

TEST_CASE("layer init honours bounds and dimension checks fire") {
    Rng rng(51);
    ConvLayer layer = conv_layer_init(4, 3, 3, rng, 1.0, 0.5);
    CHECK(layer.kernel.dim(0) == 4);
    CHECK(layer.kernel.dim(3) == 3);
    const real bound = 1 / std::sqrt(real(27));
    for (size_t i = 0; i < layer.kernel.numel(); ++i) CHECK(std::abs(layer.kernel.data()[i]) <= bound);
    for (int i = 0; i < 4; ++i) CHECK(layer.bias.data()[i] == real(0.5));

    NetDims bad = small_dims(10);
    bad.resolution = 48;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_dims(0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_dims(10);
    bad.sem_channels[3] = 32;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_dims(10);
    bad.gen_width = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
