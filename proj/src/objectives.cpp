#include "mtx/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/train.hpp"

namespace mtx {

namespace {

Tensor row_vector(const std::vector<Tensor>& scalars) {
    std::vector<Tensor> parts;
    parts.reserve(scalars.size());
    for (const Tensor& t : scalars) parts.push_back(reshape(t, {1}));
    return concat(parts, 0);
}

DetailEncoderParams detached_copy(const DetailEncoderParams& p) {
    DetailEncoderParams out;
    for (size_t i = 0; i < p.blocks.size(); ++i)
        out.blocks[i] = {p.blocks[i].kernel.detach(), p.blocks[i].bias.detach()};
    return out;
}

// Attention-pooled per-word cosine scores aggregated by log-sum-exp.
Tensor word_match_score(const ImageFeatures& img, const TextFeatures& txt, const DamsmTemps& temps) {
    const Tensor corr = matmul(transpose(txt.words), img.v);          // (L, R)
    const Tensor attn = softmax(mul_scalar(corr, temps.gamma1), 1);   // per word over regions
    const Tensor ctx = matmul(img.v, transpose(attn));                // (C, L)
    const Tensor cosines = sum(mul(l2_normalize(ctx, 0), l2_normalize(txt.words, 0)), 0);
    const Tensor lse = log(sum(exp(mul_scalar(cosines, temps.gamma2))));
    return mul_scalar(lse, real(1) / temps.gamma2);
}

Tensor sentence_match_score(const ImageFeatures& img, const TextFeatures& txt) {
    const Tensor pooled = l2_normalize(pooled_features(img), 0);
    return sum(mul(pooled, l2_normalize(txt.sentence, 0)));
}

// -mean_k log softmax(gamma * scores[k])[k]; scores indexed [row][col],
// flip=false matches over columns (image retrieves text), flip=true over rows.
Tensor posterior_ce(const std::vector<std::vector<Tensor>>& scores, real gamma, bool flip) {
    const int n = static_cast<int>(scores.size());
    std::vector<Tensor> terms;
    terms.reserve(n);
    for (int k = 0; k < n; ++k) {
        std::vector<Tensor> entries;
        entries.reserve(n);
        for (int j = 0; j < n; ++j) entries.push_back(flip ? scores[j][k] : scores[k][j]);
        const Tensor probs = softmax(mul_scalar(row_vector(entries), gamma), 0);
        std::vector<real> onehot(static_cast<size_t>(n), 0);
        onehot[static_cast<size_t>(k)] = 1;
        terms.push_back(mul_scalar(log(sum(mul(probs, Tensor::from({n}, std::move(onehot))))), real(-1)));
    }
    return mean(row_vector(terms));
}

}  // namespace

std::vector<GanBatchItem> prepare_items(const Dataset& dataset, const Vocabulary& vocab) {
    std::vector<GanBatchItem> items;
    items.reserve(dataset.samples.size());
    for (const Sample& s : dataset.samples) {
        GanBatchItem item;
        item.source = render(s.scene, dataset.resolution);
        item.image = s.matched ? item.source : render(s.caption_scene, dataset.resolution);
        item.tokens = tokenize(s.text, vocab);
        item.labels = label_words(item.tokens, vocab);
        items.push_back(std::move(item));
    }
    return items;
}

Tensor perceptual_loss(const Tensor& gen, const Tensor& ref, const DetailEncoderParams& detail, int layer) {
    const DetailEncoderParams frozen = detached_copy(detail);
    const Tensor diff = detail_activation(gen, frozen, layer) - detail_activation(ref, frozen, layer);
    return mean(mul(diff, diff));
}

Tensor damsm_loss(const std::vector<ImageFeatures>& images, const std::vector<TextFeatures>& texts,
                  const DamsmTemps& temps) {
    if (images.size() != texts.size())
        throw DimError("damsm_loss: " + std::to_string(images.size()) + " images vs " +
                       std::to_string(texts.size()) + " captions");
    const int n = static_cast<int>(images.size());
    if (n < 2) throw StateError("damsm_loss needs at least 2 pairs for negatives, got " + std::to_string(n));
    std::vector<std::vector<Tensor>> wscore(n), sscore(n);
    for (int k = 0; k < n; ++k) {
        wscore[k].reserve(n);
        sscore[k].reserve(n);
        for (int j = 0; j < n; ++j) {
            wscore[k].push_back(word_match_score(images[k], texts[j], temps));
            sscore[k].push_back(sentence_match_score(images[k], texts[j]));
        }
    }
    const real g = temps.gamma3;
    return posterior_ce(wscore, g, false) + posterior_ce(wscore, g, true) + posterior_ce(sscore, g, false) +
           posterior_ce(sscore, g, true);
}

Tensor damsm_loss(const std::vector<Tensor>& images, const std::vector<TokenSeq>& captions,
                  const SemanticEncoderParams& sem, const TextEncoderParams& text,
                  const DamsmTemps& temps) {
    if (images.size() != captions.size())
        throw DimError("damsm_loss: image and caption counts differ");
    std::vector<ImageFeatures> feats;
    std::vector<TextFeatures> tfs;
    feats.reserve(images.size());
    tfs.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        feats.push_back(encode_semantic(images[i], sem));
        tfs.push_back(encode_text(captions[i], text));
    }
    return damsm_loss(feats, tfs, temps);
}

namespace {

void check_batch_sizes(size_t batch, size_t fakes, size_t texts) {
    if (batch == 0) throw StateError("objective called with an empty batch");
    if (batch != fakes || batch != texts)
        throw DimError("objective batch size mismatch: " + std::to_string(batch) + " items, " +
                       std::to_string(fakes) + " fakes, " + std::to_string(texts) + " text features");
}

}  // namespace

ObjectiveOut generator_objective(const std::vector<GanBatchItem>& batch, const std::vector<GenResult>& fakes,
                                 const std::vector<TextFeatures>& texts, const GeneratorParams& gen,
                                 const DiscriminatorParams& disc, const LossWeights& weights,
                                 FeedbackHead head, const ObjectiveOptions& options) {
    check_batch_sizes(batch.size(), fakes.size(), texts.size());
    const int n = static_cast<int>(batch.size());

    std::vector<Tensor> du, dc, per_terms, word_terms, kl_terms;
    std::vector<ImageFeatures> fake_sem;
    const bool want_damsm = weights.lambda3 != 0 && n >= 2;
    const bool want_word = weights.lambda2 != 0;
    for (int i = 0; i < n; ++i) {
        const Tensor& fake = fakes[static_cast<size_t>(i)].image;
        du.push_back(reshape(discriminate(fake, disc), {1}));
        const Tensor sent = texts[static_cast<size_t>(i)].sentence;
        dc.push_back(reshape(discriminate(fake, &sent, disc), {1}));
        if (weights.lambda1 != 0)
            per_terms.push_back(
                reshape(perceptual_loss(fake, batch[static_cast<size_t>(i)].image, gen.detail,
                                        options.perceptual_layer),
                        {1}));
        if (want_word || want_damsm) fake_sem.push_back(encode_semantic(fake, gen.sem));
        if (want_word)
            word_terms.push_back(reshape(feedback_loss(head, fake_sem.back().v,
                                                       texts[static_cast<size_t>(i)].words,
                                                       batch[static_cast<size_t>(i)].labels),
                                         {1}));
        if (weights.ca_kl != 0)
            kl_terms.push_back(reshape(cond_augment_kl({fakes[static_cast<size_t>(i)].image,
                                                        fakes[static_cast<size_t>(i)].ca_mu,
                                                        fakes[static_cast<size_t>(i)].ca_log_sigma}),
                                       {1}));
    }

    const Tensor uncond = mul_scalar(bce(concat(du, 0), Tensor::ones({n})), real(0.5));
    const Tensor cond = mul_scalar(bce(concat(dc, 0), Tensor::ones({n})), real(0.5));
    Tensor total = uncond + cond;

    ObjectiveOut out;
    out.parts.uncond_adv = uncond.item();
    out.parts.cond_adv = cond.item();
    if (!per_terms.empty()) {
        const Tensor per = mean(concat(per_terms, 0));
        out.parts.perceptual = per.item();
        total = total + mul_scalar(per, weights.lambda1);
    }
    if (!word_terms.empty()) {
        const Tensor word = mean(concat(word_terms, 0));
        out.parts.word = word.item();
        total = total + mul_scalar(word, weights.lambda2);
    }
    if (want_damsm) {
        const Tensor dm = damsm_loss(fake_sem, texts, options.temps);
        out.parts.damsm = dm.item();
        total = total + mul_scalar(dm, weights.lambda3);
    }
    if (!kl_terms.empty()) total = total + mul_scalar(mean(concat(kl_terms, 0)), weights.ca_kl);
    out.loss = total;
    out.parts.total = total.item();
    return out;
}

ObjectiveOut generator_objective(const std::vector<GanBatchItem>& batch, const GeneratorParams& gen,
                                 const DiscriminatorParams& disc, const LossWeights& weights,
                                 FeedbackHead head, Rng& rng, const ObjectiveOptions& options) {
    std::vector<GenResult> fakes;
    std::vector<TextFeatures> texts;
    fakes.reserve(batch.size());
    texts.reserve(batch.size());
    GenOptions gopt;
    gopt.deterministic = options.deterministic;
    for (const GanBatchItem& item : batch) {
        fakes.push_back(generate_full(item.source, item.tokens, gen, rng, gopt));
        texts.push_back(encode_text(item.tokens, gen.text));
    }
    return generator_objective(batch, fakes, texts, gen, disc, weights, head, options);
}

ObjectiveOut discriminator_objective(const std::vector<GanBatchItem>& batch,
                                     const std::vector<Tensor>& fake_values,
                                     const std::vector<TextFeatures>& texts, const GeneratorParams& gen,
                                     const DiscriminatorParams& disc, const LossWeights& weights,
                                     FeedbackHead head, const ObjectiveOptions& options) {
    (void)options;
    check_batch_sizes(batch.size(), fake_values.size(), texts.size());
    const int n = static_cast<int>(batch.size());

    std::vector<Tensor> ru, rc, fu, fc, word_terms;
    for (int i = 0; i < n; ++i) {
        const GanBatchItem& item = batch[static_cast<size_t>(i)];
        const Tensor fake = fake_values[static_cast<size_t>(i)].detach();
        const Tensor sent = texts[static_cast<size_t>(i)].sentence;
        ru.push_back(reshape(discriminate(item.image, disc), {1}));
        fu.push_back(reshape(discriminate(fake, disc), {1}));
        rc.push_back(reshape(discriminate(item.image, &sent, disc), {1}));
        fc.push_back(reshape(discriminate(fake, &sent, disc), {1}));
        if (weights.lambda4 != 0) {
            // No discriminator gradient flows here: the semantic encoder is
            // frozen and the fake is detached. Real targets are the word
            // labels; fake targets are zero for all words.
            const Tensor real_feats = encode_semantic(item.image, gen.sem).v;
            const Tensor fake_feats = encode_semantic(fake, gen.sem).v;
            const Tensor& words = texts[static_cast<size_t>(i)].words;
            const Tensor real_term = feedback_loss(head, real_feats, words, item.labels);
            const Tensor fake_term =
                feedback_loss(head, fake_feats, words, Tensor::zeros(item.labels.shape()));
            word_terms.push_back(reshape(real_term + fake_term, {1}));
        }
    }

    const Tensor ones = Tensor::ones({n});
    const Tensor zeros = Tensor::zeros({n});
    const Tensor uncond =
        mul_scalar(bce(concat(ru, 0), ones) + bce(concat(fu, 0), zeros), real(0.5));
    const Tensor cond = mul_scalar(bce(concat(rc, 0), ones) + bce(concat(fc, 0), zeros), real(0.5));
    Tensor total = uncond + cond;

    ObjectiveOut out;
    out.parts.uncond_adv = uncond.item();
    out.parts.cond_adv = cond.item();
    if (!word_terms.empty()) {
        const Tensor word = mean(concat(word_terms, 0));
        out.parts.word = word.item();
        total = total + mul_scalar(word, weights.lambda4);
    }
    out.loss = total;
    out.parts.total = total.item();
    return out;
}

ObjectiveOut discriminator_objective(const std::vector<GanBatchItem>& batch, const GeneratorParams& gen,
                                     const DiscriminatorParams& disc, const LossWeights& weights,
                                     FeedbackHead head, Rng& rng, const ObjectiveOptions& options) {
    std::vector<Tensor> fakes;
    std::vector<TextFeatures> texts;
    fakes.reserve(batch.size());
    texts.reserve(batch.size());
    GenOptions gopt;
    gopt.deterministic = options.deterministic;
    for (const GanBatchItem& item : batch) {
        fakes.push_back(generate(item.source, item.tokens, gen, rng, gopt).detach());
        texts.push_back(encode_text(item.tokens, gen.text));
    }
    return discriminator_objective(batch, fakes, texts, gen, disc, weights, head, options);
}

real retrieval_accuracy(const std::vector<GanBatchItem>& items, const TextEncoderParams& text,
                        const SemanticEncoderParams& sem, const DamsmTemps& temps, int batch) {
    if (batch < 2) throw StateError("retrieval needs batches of at least 2");
    int correct = 0, counted = 0;
    for (size_t start = 0; start + 2 <= items.size(); start += static_cast<size_t>(batch)) {
        const size_t end = std::min(items.size(), start + static_cast<size_t>(batch));
        if (end - start < 2) break;
        std::vector<ImageFeatures> feats;
        std::vector<TextFeatures> tfs;
        for (size_t i = start; i < end; ++i) {
            feats.push_back(encode_semantic(items[i].image, sem));
            tfs.push_back(encode_text(items[i].tokens, text));
        }
        const int k = static_cast<int>(end - start);
        for (int a = 0; a < k; ++a) {
            int best = 0;
            real best_score = real(-1e30);
            for (int b = 0; b < k; ++b) {
                const real s = word_match_score(feats[static_cast<size_t>(a)], tfs[static_cast<size_t>(b)], temps).item() +
                               sentence_match_score(feats[static_cast<size_t>(a)], tfs[static_cast<size_t>(b)]).item();
                if (s > best_score) {
                    best_score = s;
                    best = b;
                }
            }
            if (best == a) ++correct;
            ++counted;
        }
    }
    if (counted == 0) throw StateError("retrieval_accuracy: no usable batches");
    return real(correct) / real(counted);
}

PretrainResult pretrain_matching(const std::vector<GanBatchItem>& train_items,
                                 const std::vector<GanBatchItem>& heldout_items, TextEncoderParams& text,
                                 SemanticEncoderParams& sem, const PretrainConfig& config, Rng& rng) {
    if (train_items.size() < 2) throw StateError("pretraining needs at least 2 matched pairs");
    if (heldout_items.size() < 2) throw StateError("pretraining needs a held-out split of at least 2 pairs");

    NamedParams params;
    text.collect(params, "text");
    sem.collect(params, "sem");
    set_requires_grad(params, true);
    AdamConfig acfg;
    acfg.lr = config.lr;
    acfg.beta1 = real(0.9);
    AdamState opt = AdamState::init(params, acfg);

    PretrainResult result;
    std::vector<size_t> order(train_items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
        for (size_t start = 0; start + 2 <= order.size(); start += static_cast<size_t>(config.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch));
            if (end - start < 2) break;
            std::vector<ImageFeatures> feats;
            std::vector<TextFeatures> tfs;
            for (size_t i = start; i < end; ++i) {
                feats.push_back(encode_semantic(train_items[order[i]].image, sem));
                tfs.push_back(encode_text(train_items[order[i]].tokens, text));
            }
            zero_grads(params);
            backward(damsm_loss(feats, tfs, config.temps));
            adam_step(params, opt);
        }
        result.retrieval = retrieval_accuracy(heldout_items, text, sem, config.temps, config.batch);
        result.history.push_back(result.retrieval);
        result.epochs_run = epoch + 1;
        if (result.retrieval >= config.threshold) {
            set_requires_grad(params, false);
            return result;
        }
    }
    std::ostringstream msg;
    msg << "matching pretraining stalled below " << config.threshold << " after " << config.epochs
        << " epochs; held-out retrieval per epoch:";
    for (real r : result.history) msg << " " << r;
    throw TrainError(msg.str());
}

}  // namespace mtx
