#pragma once

#include <string>

#include "mtx/tensor.hpp"

namespace mtx {

// Pluggable word-feedback variants. kWord is the default parameter-free
// chain; kTad and kCd are the comparison heads; kNone disables the term.
enum class FeedbackHead { kWord, kTad, kCd, kNone };

FeedbackHead feedback_from_str(const std::string& name);
std::string feedback_str(FeedbackHead head);

// m = w^T v. words: (C, L) unit columns; regions: (C, R). Result (L, R).
Tensor correlate(const Tensor& words, const Tensor& regions);

struct AttentionMaps {
    Tensor alpha;  // softmax over words per region; columns sum to 1
    Tensor beta;   // softmax of alpha over regions per word; rows sum to 1
};

// Double normalization of the raw correlation. The second softmax
// exponentiates alpha itself, so beta rows are near-uniform but ordered by
// alpha; both maps are invariant-checked in the tests.
AttentionMaps normalize_attention(const Tensor& correlation);

// n = v beta^T, summed over channels and softmaxed into a distribution over
// words: how strongly each word is present in the image regions.
Tensor word_presence(const Tensor& regions, const Tensor& beta);

// Mean BCE between the presence distribution and the word labels. The chain
// has no trainable parameters of its own.
Tensor word_level_loss(const Tensor& regions, const Tensor& words, const Tensor& labels);

// Pooled-feature variant: global average over regions, per-word sigmoid
// similarity, BCE against the labels.
Tensor tad_loss(const Tensor& regions, const Tensor& words, const Tensor& labels);

// Cosine variant: per-word spatial attention, contexts pooled over words,
// one cosine against the mean word vector, hinge loss. All-zero labels mark
// the fake-side target.
Tensor cd_loss(const Tensor& regions, const Tensor& words, const Tensor& labels);

// Dispatch on the configured head; kNone contributes an exact zero.
Tensor feedback_loss(FeedbackHead head, const Tensor& regions, const Tensor& words, const Tensor& labels);

}  // namespace mtx
