#pragma once

#include <vector>

#include "mtx/data.hpp"
#include "mtx/feedback.hpp"
#include "mtx/nets.hpp"
#include "mtx/tensor.hpp"
#include "mtx/text.hpp"

namespace mtx {

struct LossWeights {
    real lambda1 = 1;  // perceptual
    real lambda2 = 1;  // generator word feedback
    real lambda3 = 1;  // text-image matching
    real lambda4 = 1;  // discriminator word feedback
    real ca_kl = 0;    // optional conditioning-augmentation regularizer
};

// Raw (unweighted) per-step components; total carries the weights.
struct LossBreakdown {
    real uncond_adv = 0;
    real cond_adv = 0;
    real perceptual = 0;
    real word = 0;
    real damsm = 0;
    real total = 0;
};

struct DamsmTemps {
    real gamma1 = 5;  // word-region attention
    real gamma2 = 5;  // log-sum-exp aggregation over words
    real gamma3 = 5;  // batch posterior sharpening
};

struct ObjectiveOptions {
    int perceptual_layer = 2;
    DamsmTemps temps;
    bool deterministic = false;  // conditioning code sampling off
};

// One training example. `image` is the image the caption describes: the real
// sample and the reference every loss term scores against. `source` is what
// the generator edits; it shares `image` for matched pairs and shows the
// original (differently colored) scene for mismatched ones.
struct GanBatchItem {
    Tensor image;
    Tensor source;
    TokenSeq tokens;
    Tensor labels;
};

std::vector<GanBatchItem> prepare_items(const Dataset& dataset, const Vocabulary& vocab);

// Mean-squared distance between detail-encoder activations at `layer`.
// Gradients flow into both images but not into the encoder parameters.
Tensor perceptual_loss(const Tensor& gen, const Tensor& ref, const DetailEncoderParams& detail, int layer);

// Batch text-image matching loss: word-level attention-pooled cosine scores
// and sentence-level cosine scores, each turned into a two-directional
// softmax cross-entropy over the batch. Needs at least 2 pairs.
Tensor damsm_loss(const std::vector<ImageFeatures>& images, const std::vector<TextFeatures>& texts,
                  const DamsmTemps& temps);
Tensor damsm_loss(const std::vector<Tensor>& images, const std::vector<TokenSeq>& captions,
                  const SemanticEncoderParams& sem, const TextEncoderParams& text,
                  const DamsmTemps& temps);

struct ObjectiveOut {
    Tensor loss;  // weighted total, graph root
    LossBreakdown parts;
};

// Weighted generator loss over precomputed generator outputs (their graphs
// stay attached, so one backward trains the generator through the current
// discriminator).
ObjectiveOut generator_objective(const std::vector<GanBatchItem>& batch, const std::vector<GenResult>& fakes,
                                 const std::vector<TextFeatures>& texts, const GeneratorParams& gen,
                                 const DiscriminatorParams& disc, const LossWeights& weights,
                                 FeedbackHead head, const ObjectiveOptions& options = {});
// Convenience form that runs the generator forward itself.
ObjectiveOut generator_objective(const std::vector<GanBatchItem>& batch, const GeneratorParams& gen,
                                 const DiscriminatorParams& disc, const LossWeights& weights,
                                 FeedbackHead head, Rng& rng, const ObjectiveOptions& options = {});

// Weighted discriminator loss; fake images must be detached values. The
// word-feedback terms use the frozen semantic encoder, so they carry no
// discriminator gradient and are recorded for the report only.
ObjectiveOut discriminator_objective(const std::vector<GanBatchItem>& batch,
                                     const std::vector<Tensor>& fake_values,
                                     const std::vector<TextFeatures>& texts, const GeneratorParams& gen,
                                     const DiscriminatorParams& disc, const LossWeights& weights,
                                     FeedbackHead head, const ObjectiveOptions& options = {});
ObjectiveOut discriminator_objective(const std::vector<GanBatchItem>& batch, const GeneratorParams& gen,
                                     const DiscriminatorParams& disc, const LossWeights& weights,
                                     FeedbackHead head, Rng& rng, const ObjectiveOptions& options = {});

struct PretrainConfig {
    int epochs = 80;
    int batch = 16;
    real lr = real(1e-3);
    real threshold = real(0.90);
    DamsmTemps temps;
};

struct PretrainResult {
    real retrieval = 0;
    int epochs_run = 0;
    std::vector<real> history;  // held-out retrieval per epoch
};

// Fraction of images whose own caption wins the combined word+sentence match
// score within batches of `batch` held-out pairs.
real retrieval_accuracy(const std::vector<GanBatchItem>& items, const TextEncoderParams& text,
                        const SemanticEncoderParams& sem, const DamsmTemps& temps, int batch);

// Joint text/semantic encoder training on matched pairs until held-out
// retrieval reaches the threshold; both encoders come out frozen. Failure to
// reach the threshold raises a training error with the accuracy history.
PretrainResult pretrain_matching(const std::vector<GanBatchItem>& train_items,
                                 const std::vector<GanBatchItem>& heldout_items, TextEncoderParams& text,
                                 SemanticEncoderParams& sem, const PretrainConfig& config, Rng& rng);

}  // namespace mtx
