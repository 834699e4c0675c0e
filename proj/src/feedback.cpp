#include "mtx/feedback.hpp"

#include "mtx/error.hpp"

namespace mtx {

FeedbackHead feedback_from_str(const std::string& name) {
    if (name == "word") return FeedbackHead::kWord;
    if (name == "tad") return FeedbackHead::kTad;
    if (name == "cd") return FeedbackHead::kCd;
    if (name == "none") return FeedbackHead::kNone;
    throw ConfigError("unknown feedback head: " + name + " (expected word|tad|cd|none)");
}

std::string feedback_str(FeedbackHead head) {
    switch (head) {
        case FeedbackHead::kWord: return "word";
        case FeedbackHead::kTad: return "tad";
        case FeedbackHead::kCd: return "cd";
        default: return "none";
    }
}

namespace {

void check_feature_pair(const Tensor& words, const Tensor& regions, const char* op) {
    if (words.rank() != 2 || regions.rank() != 2)
        throw DimError(std::string(op) + ": words and regions must be rank-2, got " +
                       shape_str(words.shape()) + " and " + shape_str(regions.shape()));
    if (words.dim(0) != regions.dim(0))
        throw DimError(std::string(op) + ": channel mismatch: words " + shape_str(words.shape()) +
                       " vs regions " + shape_str(regions.shape()));
}

void check_labels(const Tensor& labels, int len, const char* op) {
    if (labels.rank() != 1 || labels.dim(0) != len)
        throw DimError(std::string(op) + ": labels shape " + shape_str(labels.shape()) + ", expected (" +
                       std::to_string(len) + ")");
}

}  // namespace

Tensor correlate(const Tensor& words, const Tensor& regions) {
    check_feature_pair(words, regions, "correlate");
    return matmul(transpose(words), regions);
}

AttentionMaps normalize_attention(const Tensor& correlation) {
    if (correlation.rank() != 2)
        throw DimError("normalize_attention: expected (L,R), got " + shape_str(correlation.shape()));
    AttentionMaps maps;
    maps.alpha = softmax(correlation, 0);
    maps.beta = softmax(maps.alpha, 1);
    return maps;
}

Tensor word_presence(const Tensor& regions, const Tensor& beta) {
    if (regions.rank() != 2 || beta.rank() != 2 || regions.dim(1) != beta.dim(1))
        throw DimError("word_presence: regions " + shape_str(regions.shape()) + " vs beta " +
                       shape_str(beta.shape()));
    const Tensor attended = matmul(regions, transpose(beta));  // (C, L)
    return softmax(sum(attended, 0), 0);
}

Tensor word_level_loss(const Tensor& regions, const Tensor& words, const Tensor& labels) {
    check_feature_pair(words, regions, "word_level_loss");
    check_labels(labels, words.dim(1), "word_level_loss");
    const AttentionMaps maps = normalize_attention(correlate(words, regions));
    return bce(word_presence(regions, maps.beta), labels);
}

Tensor tad_loss(const Tensor& regions, const Tensor& words, const Tensor& labels) {
    check_feature_pair(words, regions, "tad_loss");
    check_labels(labels, words.dim(1), "tad_loss");
    const Tensor pooled = mul_scalar(sum(regions, 1), real(1) / static_cast<real>(regions.dim(1)));
    const Tensor sims = sigmoid(matmul(transpose(words), pooled));
    return bce(sims, labels);
}

Tensor cd_loss(const Tensor& regions, const Tensor& words, const Tensor& labels) {
    check_feature_pair(words, regions, "cd_loss");
    check_labels(labels, words.dim(1), "cd_loss");
    const int len = words.dim(1);
    const Tensor attn = softmax(correlate(words, regions), 1);     // over regions per word
    const Tensor contexts = matmul(regions, transpose(attn));      // (C, L)
    const Tensor pooled = mul_scalar(sum(contexts, 1), real(1) / static_cast<real>(len));
    const Tensor sentence = l2_normalize(mul_scalar(sum(words, 1), real(1) / static_cast<real>(len)), 0);
    const Tensor score = sum(mul(l2_normalize(pooled, 0), sentence));
    bool real_target = false;
    for (real l : labels.data()) real_target = real_target || l > real(0.5);
    const Tensor margin = real_target ? add_scalar(mul_scalar(score, real(-1)), real(1))
                                      : add_scalar(score, real(1));
    return relu(margin);
}

Tensor feedback_loss(FeedbackHead head, const Tensor& regions, const Tensor& words, const Tensor& labels) {
    switch (head) {
        case FeedbackHead::kWord: return word_level_loss(regions, words, labels);
        case FeedbackHead::kTad: return tad_loss(regions, words, labels);
        case FeedbackHead::kCd: return cd_loss(regions, words, labels);
        default: return Tensor::scalar(real(0));
    }
}

}  // namespace mtx
