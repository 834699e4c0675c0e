#pragma once

#include <string>
#include <vector>

#include "mtx/params.hpp"
#include "mtx/rng.hpp"
#include "mtx/tensor.hpp"

namespace mtx {

inline constexpr int kMaxCaptionLen = 12;

enum class Pos : uint8_t { kNoun, kAdj, kOther };

std::string pos_str(Pos pos);
Pos pos_from_str(const std::string& text);

struct VocabEntry {
    std::string token;
    Pos pos;
};

// Closed vocabulary with a part-of-speech tag per token. Ids follow the
// sorted token order, so a vocabulary file and its in-memory form agree.
class Vocabulary {
  public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<VocabEntry> entries);

    // File format: one "token<TAB>POS" line per entry, UTF-8, sorted by token.
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int id(const std::string& token) const;  // throws VocabError for unknown tokens
    bool contains(const std::string& token) const;
    const std::string& token(int id) const;
    Pos pos(int id) const;
    int size() const { return static_cast<int>(entries_.size()); }

  private:
    std::vector<VocabEntry> entries_;
};

struct TokenSeq {
    std::vector<int> ids;
    int length() const { return static_cast<int>(ids.size()); }
};

// Lowercases, strips surrounding punctuation, splits on whitespace, truncates
// to kMaxCaptionLen tokens. Empty input is an error; unknown tokens raise
// VocabError naming the token.
TokenSeq tokenize(const std::string& caption, const Vocabulary& vocab);

// Multi-hot labels over the sequence: 1 for every noun or adjective.
Tensor label_words(const TokenSeq& tokens, const Vocabulary& vocab);

struct GruCell {
    Tensor wz, uz, bz;
    Tensor wr, ur, br;
    Tensor wh, uh, bh;
};

struct TextEncoderParams {
    Tensor embedding;  // (V, E)
    GruCell fwd, bwd;
    int embed_dim = 0;
    int hidden = 0;  // per direction; feature width C = 2*hidden

    static TextEncoderParams init(int vocab_size, int embed_dim, int hidden, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
};

struct TextFeatures {
    Tensor words;     // (C, L), unit-norm columns
    Tensor sentence;  // (C), unit norm
};

// Bidirectional GRU over the token embeddings. Word features are the
// per-token hidden states (both directions concatenated); the sentence
// embedding concatenates the two final states.
TextFeatures encode_text(const TokenSeq& tokens, const TextEncoderParams& params);

struct CondAugmentParams {
    Tensor w_mu, b_mu;  // (Cca, C), (Cca)
    Tensor w_ls, b_ls;  // log-sigma head

    static CondAugmentParams init(int in_dim, int out_dim, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
};

struct CondAugmentOut {
    Tensor code;       // mu + sigma * eps, or mu when deterministic
    Tensor mu;
    Tensor log_sigma;
};

// Reparameterized conditioning code. The noise draw is the only stochastic
// step; deterministic mode returns mu(s) exactly.
CondAugmentOut conditioning_augment(const Tensor& sentence, const CondAugmentParams& params, Rng& rng,
                                    bool deterministic);

// KL(N(mu, sigma^2) || N(0, 1)); disabled by default, exposed for the
// optional regularizer.
Tensor cond_augment_kl(const CondAugmentOut& ca);

}  // namespace mtx
