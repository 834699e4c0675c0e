#include "mtx/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/util.hpp"

namespace mtx {

std::string pos_str(Pos pos) {
    switch (pos) {
        case Pos::kNoun: return "NOUN";
        case Pos::kAdj: return "ADJ";
        default: return "OTHER";
    }
}

Pos pos_from_str(const std::string& text) {
    if (text == "NOUN") return Pos::kNoun;
    if (text == "ADJ") return Pos::kAdj;
    if (text == "OTHER") return Pos::kOther;
    throw VocabError("unknown part-of-speech tag: " + text);
}

Vocabulary::Vocabulary(std::vector<VocabEntry> entries) : entries_(std::move(entries)) {
    std::sort(entries_.begin(), entries_.end(),
              [](const VocabEntry& a, const VocabEntry& b) { return a.token < b.token; });
    for (size_t i = 1; i < entries_.size(); ++i) {
        if (entries_[i].token == entries_[i - 1].token)
            throw VocabError("duplicate vocabulary token: " + entries_[i].token);
    }
    for (const VocabEntry& e : entries_) {
        if (e.token.empty()) throw VocabError("empty vocabulary token");
    }
}

Vocabulary Vocabulary::load(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<VocabEntry> entries;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw VocabError(path + ":" + std::to_string(lineno) + ": expected token<TAB>POS");
        entries.push_back({line.substr(0, tab), pos_from_str(line.substr(tab + 1))});
    }
    return Vocabulary(std::move(entries));
}

void Vocabulary::save(const std::string& path) const {
    std::ostringstream out;
    for (const VocabEntry& e : entries_) out << e.token << '\t' << pos_str(e.pos) << '\n';
    atomic_write(path, out.str());
}

int Vocabulary::id(const std::string& token) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), token,
                               [](const VocabEntry& e, const std::string& t) { return e.token < t; });
    if (it == entries_.end() || it->token != token)
        throw VocabError("token not in vocabulary: " + token);
    return static_cast<int>(it - entries_.begin());
}

bool Vocabulary::contains(const std::string& token) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), token,
                               [](const VocabEntry& e, const std::string& t) { return e.token < t; });
    return it != entries_.end() && it->token == token;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
    return entries_[id].token;
}

Pos Vocabulary::pos(int id) const {
    if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
    return entries_[id].pos;
}

TokenSeq tokenize(const std::string& caption, const Vocabulary& vocab) {
    TokenSeq out;
    std::istringstream in(caption);
    std::string word;
    while (in >> word && out.length() < kMaxCaptionLen) {
        std::string clean;
        for (char c : word) clean.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        size_t begin = 0, end = clean.size();
        while (begin < end && std::ispunct(static_cast<unsigned char>(clean[begin]))) ++begin;
        while (end > begin && std::ispunct(static_cast<unsigned char>(clean[end - 1]))) --end;
        if (begin == end) continue;
        out.ids.push_back(vocab.id(clean.substr(begin, end - begin)));
    }
    if (out.ids.empty()) throw StateError("tokenize: caption has no usable tokens");
    return out;
}

Tensor label_words(const TokenSeq& tokens, const Vocabulary& vocab) {
    std::vector<real> labels(tokens.ids.size());
    for (size_t i = 0; i < tokens.ids.size(); ++i) {
        const Pos p = vocab.pos(tokens.ids[i]);
        labels[i] = (p == Pos::kNoun || p == Pos::kAdj) ? real(1) : real(0);
    }
    return Tensor::from({tokens.length()}, std::move(labels));
}

namespace {

Tensor init_matrix(int rows, int cols, real scale, Rng& rng) {
    return Tensor::uniform({rows, cols}, rng, -scale, scale).set_requires_grad(true);
}

GruCell init_gru(int hidden, int embed, Rng& rng) {
    const real wi = real(1) / std::sqrt(static_cast<real>(embed));
    const real wh = real(1) / std::sqrt(static_cast<real>(hidden));
    GruCell cell;
    cell.wz = init_matrix(hidden, embed, wi, rng);
    cell.uz = init_matrix(hidden, hidden, wh, rng);
    cell.bz = Tensor::zeros({hidden}).set_requires_grad(true);
    cell.wr = init_matrix(hidden, embed, wi, rng);
    cell.ur = init_matrix(hidden, hidden, wh, rng);
    cell.br = Tensor::zeros({hidden}).set_requires_grad(true);
    cell.wh = init_matrix(hidden, embed, wi, rng);
    cell.uh = init_matrix(hidden, hidden, wh, rng);
    cell.bh = Tensor::zeros({hidden}).set_requires_grad(true);
    return cell;
}

void collect_gru(const GruCell& cell, NamedParams& out, const std::string& prefix) {
    add_param(out, prefix + "/wz", cell.wz);
    add_param(out, prefix + "/uz", cell.uz);
    add_param(out, prefix + "/bz", cell.bz);
    add_param(out, prefix + "/wr", cell.wr);
    add_param(out, prefix + "/ur", cell.ur);
    add_param(out, prefix + "/br", cell.br);
    add_param(out, prefix + "/wh", cell.wh);
    add_param(out, prefix + "/uh", cell.uh);
    add_param(out, prefix + "/bh", cell.bh);
}

Tensor gru_step(const GruCell& cell, const Tensor& x, const Tensor& h) {
    const Tensor z = sigmoid(matmul(cell.wz, x) + matmul(cell.uz, h) + cell.bz);
    const Tensor r = sigmoid(matmul(cell.wr, x) + matmul(cell.ur, h) + cell.br);
    const Tensor cand = tanh(matmul(cell.wh, x) + matmul(cell.uh, mul(r, h)) + cell.bh);
    return h + mul(z, cand - h);
}

}  // namespace

TextEncoderParams TextEncoderParams::init(int vocab_size, int embed_dim, int hidden, Rng& rng) {
    if (vocab_size <= 0 || embed_dim <= 0 || hidden <= 0)
        throw StateError("TextEncoderParams::init: dimensions must be positive");
    TextEncoderParams p;
    p.embed_dim = embed_dim;
    p.hidden = hidden;
    p.embedding = Tensor::randn({vocab_size, embed_dim}, rng, real(0.1)).set_requires_grad(true);
    p.fwd = init_gru(hidden, embed_dim, rng);
    p.bwd = init_gru(hidden, embed_dim, rng);
    return p;
}

void TextEncoderParams::collect(NamedParams& out, const std::string& prefix) const {
    add_param(out, prefix + "/embed", embedding);
    collect_gru(fwd, out, prefix + "/fwd");
    collect_gru(bwd, out, prefix + "/bwd");
}

TextFeatures encode_text(const TokenSeq& tokens, const TextEncoderParams& params) {
    const int len = tokens.length();
    if (len == 0) throw StateError("encode_text: empty token sequence");
    if (len > kMaxCaptionLen)
        throw StateError("encode_text: sequence length " + std::to_string(len) + " exceeds limit " +
                         std::to_string(kMaxCaptionLen));
    std::vector<Tensor> embeds(len);
    for (int t = 0; t < len; ++t) embeds[t] = embedding_row(params.embedding, tokens.ids[t]);

    std::vector<Tensor> fwd_states(len), bwd_states(len);
    Tensor h = Tensor::zeros({params.hidden});
    for (int t = 0; t < len; ++t) {
        h = gru_step(params.fwd, embeds[t], h);
        fwd_states[t] = h;
    }
    h = Tensor::zeros({params.hidden});
    for (int t = len - 1; t >= 0; --t) {
        h = gru_step(params.bwd, embeds[t], h);
        bwd_states[t] = h;
    }

    std::vector<Tensor> columns(len);
    for (int t = 0; t < len; ++t) columns[t] = concat({fwd_states[t], bwd_states[t]}, 0);
    TextFeatures out;
    out.words = l2_normalize(stack_cols(columns), 0);
    out.sentence = l2_normalize(concat({fwd_states[len - 1], bwd_states[0]}, 0), 0);
    return out;
}

CondAugmentParams CondAugmentParams::init(int in_dim, int out_dim, Rng& rng) {
    const real scale = real(1) / std::sqrt(static_cast<real>(in_dim));
    CondAugmentParams p;
    p.w_mu = init_matrix(out_dim, in_dim, scale, rng);
    p.b_mu = Tensor::zeros({out_dim}).set_requires_grad(true);
    p.w_ls = init_matrix(out_dim, in_dim, scale * real(0.1), rng);
    // Start with small noise: sigma = exp(-2) ~ 0.135.
    p.b_ls = Tensor::full({out_dim}, real(-2)).set_requires_grad(true);
    return p;
}

void CondAugmentParams::collect(NamedParams& out, const std::string& prefix) const {
    add_param(out, prefix + "/w_mu", w_mu);
    add_param(out, prefix + "/b_mu", b_mu);
    add_param(out, prefix + "/w_ls", w_ls);
    add_param(out, prefix + "/b_ls", b_ls);
}

CondAugmentOut conditioning_augment(const Tensor& sentence, const CondAugmentParams& params, Rng& rng,
                                    bool deterministic) {
    CondAugmentOut out;
    out.mu = matmul(params.w_mu, sentence) + params.b_mu;
    out.log_sigma = matmul(params.w_ls, sentence) + params.b_ls;
    if (deterministic) {
        out.code = out.mu;
        return out;
    }
    const Tensor eps = Tensor::randn({out.mu.dim(0)}, rng);
    out.code = out.mu + mul(exp(out.log_sigma), eps);
    return out;
}

Tensor cond_augment_kl(const CondAugmentOut& ca) {
    const Tensor var = exp(mul_scalar(ca.log_sigma, real(2)));
    const Tensor terms = mul(ca.mu, ca.mu) + var - mul_scalar(ca.log_sigma, real(2)) + real(-1);
    return mul_scalar(sum(terms), real(0.5));
}

}  // namespace mtx
