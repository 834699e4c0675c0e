#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mtx/data.hpp"
#include "mtx/error.hpp"
#include "mtx/objectives.hpp"
#include "mtx/params.hpp"
#include "testutil.hpp"

using namespace mtx;

namespace {

const real kLn2 = std::log(real(2));

// Discriminator whose fully connected heads are zeroed, so both scores are
// exactly sigmoid(0) = 1/2 for any input.
DiscriminatorParams coin_flip_disc(const NetDims& dims, Rng& rng) {
    DiscriminatorParams d = DiscriminatorParams::init(dims, rng);
    for (Tensor* t : {&d.u_fc_w, &d.u_fc_b, &d.c_fc_w, &d.c_fc_b})
        for (real& v : t->mutable_data()) v = 0;
    return d;
}

LossWeights adv_only() {
    LossWeights w;
    w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = 0;
    return w;
}

std::vector<GanBatchItem> two_items(const Vocabulary& vocab, uint64_t seed) {
    Dataset d = sample_batch(2, true, seed, 32);
    return prepare_items(d, vocab);
}

}  // namespace

TEST_CASE("batch items split the caption reference from the generator input") {
    Vocabulary vocab = default_vocabulary();
    Dataset d;
    d.resolution = 32;
    Sample matched;
    matched.scene = SceneSpec{ShapeKind::kCircle, 0, 2, 16, 16, 7};
    matched.caption_scene = matched.scene;
    matched.text = caption_with_template(matched.scene, 1);
    matched.matched = true;
    Sample edited;
    edited.scene = SceneSpec{ShapeKind::kSquare, 3, 4, 10, 22, 5};
    edited.caption_scene = edited.scene;
    edited.caption_scene.shape_color = 1;
    edited.text = caption_with_template(edited.caption_scene, 2);
    edited.matched = false;
    d.samples = {matched, edited};

    std::vector<GanBatchItem> items = prepare_items(d, vocab);
    REQUIRE(items.size() == 2);

    CHECK(testutil::bitwise_equal(items[0].source, items[0].image));
    CHECK(testutil::bitwise_equal(items[0].image, render(matched.scene, 32)));

    CHECK(testutil::bitwise_equal(items[1].source, render(edited.scene, 32)));
    CHECK(testutil::bitwise_equal(items[1].image, render(edited.caption_scene, 32)));
    CHECK(!testutil::bitwise_equal(items[1].source, items[1].image));

    Tensor labels = label_words(items[1].tokens, vocab);
    CHECK(testutil::bitwise_equal(items[1].labels, labels));
}

TEST_CASE("perceptual loss is the mean squared activation gap") {
    Rng rng(61);
    DetailEncoderParams det = DetailEncoderParams::init(NetDims{.vocab_size = 4}, rng);
    Tensor a = Tensor::uniform({3, 32, 32}, rng, -1, 1);
    Tensor b = Tensor::uniform({3, 32, 32}, rng, -1, 1);

    for (int layer : {1, 2}) {
        Tensor fa = detail_activation(a, det, layer);
        Tensor fb = detail_activation(b, det, layer);
        real want = 0;
        for (size_t i = 0; i < fa.numel(); ++i) {
            const real diff = fa.data()[i] - fb.data()[i];
            want += diff * diff;
        }
        want /= real(fa.numel());
        CHECK(testutil::rel_err(perceptual_loss(a, b, det, layer).item(), want) <= 1e-12);
    }

    CHECK(perceptual_loss(a, a, det, 2).item() == 0);
    CHECK(perceptual_loss(a, b, det, 1).item() != perceptual_loss(a, b, det, 2).item());

    SUBCASE("gradient flows into the image, not the encoder") {
        det.blocks[0].kernel.set_requires_grad(true);
        Tensor x = Tensor::uniform({3, 32, 32}, rng, -1, 1).set_requires_grad(true);
        backward(perceptual_loss(x, b, det, 2));
        CHECK(x.has_grad());
        CHECK(!det.blocks[0].kernel.has_grad());
        det.blocks[0].kernel.set_requires_grad(false);
    }
    SUBCASE("finite differences") {
        Tensor small = Tensor::uniform({3, 8, 8}, rng, -1, 1);
        Tensor ref = Tensor::uniform({3, 8, 8}, rng, -1, 1);
        CHECK(testutil::grad_check([&](const Tensor& x) { return perceptual_loss(x, ref, det, 2); }, small) <= 1e-4);
    }
}

TEST_CASE("matching loss sits at ln2 per direction for indistinguishable pairs") {
    Vocabulary vocab = default_vocabulary();
    Rng rng(62);
    NetDims dims{.vocab_size = vocab.size()};
    SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
    TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);

    Tensor img = render(SceneSpec{ShapeKind::kTriangle, 5, 0, 16, 16, 9}, 32);
    TokenSeq tokens = tokenize("a black triangle on a red background", vocab);
    Tensor dm = damsm_loss({img, img}, {tokens, tokens}, sem, text, DamsmTemps{});
    CHECK(std::abs(dm.item() - 4 * kLn2) <= 1e-9);

    SUBCASE("three identical pairs move the anchor to ln3") {
        Tensor dm3 = damsm_loss({img, img, img}, {tokens, tokens, tokens}, sem, text, DamsmTemps{});
        CHECK(std::abs(dm3.item() - 4 * std::log(real(3))) <= 1e-9);
    }
    SUBCASE("batch rules") {
        CHECK_THROWS_AS(damsm_loss({img}, {tokens}, sem, text, DamsmTemps{}), StateError);
        CHECK_THROWS_AS(damsm_loss({img, img}, {tokens}, sem, text, DamsmTemps{}), DimError);
    }
    SUBCASE("finite differences through the feature form") {
        Rng r2(63);
        auto make_feats = [&](const Tensor& v) { return ImageFeatures{v, 2, 3}; };
        Tensor v0 = Tensor::uniform({4, 6}, r2, -1, 1);
        Tensor v1 = Tensor::uniform({4, 6}, r2, -1, 1);
        TextFeatures t0{l2_normalize(Tensor::uniform({4, 3}, r2, -1, 1), 0),
                        l2_normalize(Tensor::uniform({4}, r2, -1, 1), 0)};
        TextFeatures t1{l2_normalize(Tensor::uniform({4, 5}, r2, -1, 1), 0),
                        l2_normalize(Tensor::uniform({4}, r2, -1, 1), 0)};
        auto f = [&](const Tensor& x) {
            return damsm_loss({make_feats(x), make_feats(v1)}, {t0, t1}, DamsmTemps{});
        };
        CHECK(testutil::grad_check(f, v0) <= 1e-4);
    }
}

TEST_CASE("a coin-flip discriminator pins the adversarial terms") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims{.vocab_size = vocab.size()};
    Rng rng(64);
    GeneratorParams gen = GeneratorParams::init(dims, rng);
    DiscriminatorParams disc = coin_flip_disc(dims, rng);
    std::vector<GanBatchItem> batch = two_items(vocab, 404);

    Rng gr(1);
    ObjectiveOut g = generator_objective(batch, gen, disc, adv_only(), FeedbackHead::kWord, gr);
    CHECK(std::abs(g.parts.total - kLn2) <= 1e-9);
    CHECK(std::abs(g.parts.uncond_adv - kLn2 / 2) <= 1e-9);
    CHECK(std::abs(g.parts.cond_adv - kLn2 / 2) <= 1e-9);
    CHECK(g.parts.perceptual == 0);
    CHECK(g.parts.word == 0);
    CHECK(g.parts.damsm == 0);
    CHECK(testutil::rel_err(g.loss.item(), g.parts.total) <= 1e-12);

    Rng dr(2);
    ObjectiveOut d = discriminator_objective(batch, gen, disc, adv_only(), FeedbackHead::kWord, dr);
    CHECK(std::abs(d.parts.total - 2 * kLn2) <= 1e-9);
    CHECK(std::abs(d.parts.uncond_adv - kLn2) <= 1e-9);
    CHECK(std::abs(d.parts.cond_adv - kLn2) <= 1e-9);
    CHECK(d.parts.word == 0);
}

TEST_CASE("weighted totals reconcile with the recorded parts") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims{.vocab_size = vocab.size()};
    Rng rng(65);
    GeneratorParams gen = GeneratorParams::init(dims, rng);
    DiscriminatorParams disc = DiscriminatorParams::init(dims, rng);
    std::vector<GanBatchItem> batch = two_items(vocab, 405);
    ObjectiveOptions options;
    options.deterministic = true;

    LossWeights w;
    Rng g1(9);
    ObjectiveOut full = generator_objective(batch, gen, disc, w, FeedbackHead::kWord, g1, options);
    const real recon = full.parts.uncond_adv + full.parts.cond_adv + w.lambda1 * full.parts.perceptual +
                       w.lambda2 * full.parts.word + w.lambda3 * full.parts.damsm;
    CHECK(std::abs(full.parts.total - recon) <= 1e-9);
    CHECK(full.parts.perceptual > 0);
    CHECK(full.parts.word > 0);
    CHECK(full.parts.damsm > 0);

    SUBCASE("doubling the perceptual weight adds exactly one more share") {
        LossWeights w2 = w;
        w2.lambda1 = 2;
        Rng g2(10);
        ObjectiveOut heavier = generator_objective(batch, gen, disc, w2, FeedbackHead::kWord, g2, options);
        CHECK(std::abs(heavier.parts.perceptual - full.parts.perceptual) <= 1e-12);
        CHECK(std::abs(heavier.parts.total - full.parts.total - full.parts.perceptual) <= 1e-9);
    }
    SUBCASE("zeroed weights drop their terms") {
        LossWeights none = adv_only();
        Rng g3(11);
        ObjectiveOut bare = generator_objective(batch, gen, disc, none, FeedbackHead::kWord, g3, options);
        CHECK(bare.parts.perceptual == 0);
        CHECK(bare.parts.word == 0);
        CHECK(bare.parts.damsm == 0);
        CHECK(std::abs(bare.parts.total - bare.parts.uncond_adv - bare.parts.cond_adv) <= 1e-12);
    }
    SUBCASE("discriminator parts reconcile too") {
        Rng d1(12);
        ObjectiveOut d = discriminator_objective(batch, gen, disc, w, FeedbackHead::kWord, d1, options);
        CHECK(std::abs(d.parts.total - d.parts.uncond_adv - d.parts.cond_adv - w.lambda4 * d.parts.word) <= 1e-9);
        CHECK(d.parts.word > 0);
        CHECK(d.parts.perceptual == 0);
        CHECK(d.parts.damsm == 0);
    }
    SUBCASE("empty and ragged batches are rejected") {
        Rng g4(13);
        CHECK_THROWS_AS(generator_objective({}, gen, disc, w, FeedbackHead::kWord, g4), StateError);
        std::vector<TextFeatures> texts{encode_text(batch[0].tokens, gen.text)};
        CHECK_THROWS_AS(
            discriminator_objective(batch, {Tensor::zeros({3, 32, 32})}, texts, gen, disc, w, FeedbackHead::kWord),
            DimError);
    }
}

TEST_CASE("discriminator training cannot reach through fakes or frozen encoders") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims{.vocab_size = vocab.size()};
    Rng rng(66);
    GeneratorParams gen = GeneratorParams::init(dims, rng);
    DiscriminatorParams disc = DiscriminatorParams::init(dims, rng);
    NamedParams dparams = disc.trainable();
    set_requires_grad(dparams, true);

    std::vector<GanBatchItem> batch = two_items(vocab, 406);
    Tensor leaf = Tensor::uniform({3, 32, 32}, rng, -1, 1).set_requires_grad(true);
    std::vector<Tensor> fakes{tanh(leaf), tanh(mul_scalar(leaf, real(0.5)))};
    std::vector<TextFeatures> texts;
    for (const GanBatchItem& item : batch) texts.push_back(encode_text(item.tokens, gen.text));

    ObjectiveOut out = discriminator_objective(batch, fakes, texts, gen, disc, LossWeights{}, FeedbackHead::kWord);
    backward(out.loss);

    CHECK(!leaf.has_grad());
    CHECK(!gen.sem.blocks[0].kernel.has_grad());
    bool any = false;
    for (const NamedTensor& p : dparams)
        if (p.tensor.has_grad())
            for (real g : p.tensor.grad()) any = any || g != 0;
    CHECK(any);
    set_requires_grad(dparams, false);
}

TEST_CASE("retrieval sits near chance for untrained encoders") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims{.vocab_size = vocab.size()};
    Rng rng(67);
    SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
    TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
    std::vector<GanBatchItem> items = prepare_items(sample_batch(32, true, 407, 32), vocab);

    real acc = retrieval_accuracy(items, text, sem, DamsmTemps{}, 8);
    CHECK(acc >= 0);
    CHECK(acc <= real(0.5));

    CHECK_THROWS_AS(retrieval_accuracy(items, text, sem, DamsmTemps{}, 1), StateError);
    CHECK_THROWS_AS(retrieval_accuracy({}, text, sem, DamsmTemps{}, 8), StateError);
}

TEST_CASE("pretraining stops at the threshold and freezes the encoders") {
    Vocabulary vocab = default_vocabulary();
    NetDims dims{.vocab_size = vocab.size()};
    Rng rng(68);
    std::vector<GanBatchItem> train = prepare_items(sample_batch(8, true, 408, 32), vocab);
    std::vector<GanBatchItem> held = prepare_items(sample_batch(8, true, 409, 32), vocab);

    SUBCASE("a zero threshold returns after one epoch") {
        SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
        TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
        PretrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch = 4;
        cfg.threshold = 0;
        Rng pr(1);
        PretrainResult res = pretrain_matching(train, held, text, sem, cfg, pr);
        CHECK(res.epochs_run == 1);
        CHECK(res.history.size() == 1);
        CHECK(res.retrieval == res.history[0]);
        NamedParams params;
        text.collect(params, "text");
        sem.collect(params, "sem");
        for (const NamedTensor& p : params) CHECK(!p.tensor.requires_grad());
    }
    SUBCASE("an unreachable threshold raises a training error") {
        SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
        TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
        PretrainConfig cfg;
        cfg.epochs = 2;
        cfg.batch = 4;
        cfg.threshold = real(1.5);
        Rng pr(2);
        CHECK_THROWS_AS(pretrain_matching(train, held, text, sem, cfg, pr), TrainError);
    }
    SUBCASE("degenerate splits are rejected") {
        SemanticEncoderParams sem = SemanticEncoderParams::init(dims, rng);
        TextEncoderParams text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
        PretrainConfig cfg;
        Rng pr(3);
        std::vector<GanBatchItem> one(train.begin(), train.begin() + 1);
        CHECK_THROWS_AS(pretrain_matching(one, held, text, sem, cfg, pr), StateError);
        CHECK_THROWS_AS(pretrain_matching(train, one, text, sem, cfg, pr), StateError);
    }
}
