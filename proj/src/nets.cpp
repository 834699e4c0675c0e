#include "mtx/nets.hpp"

#include <cmath>

#include "mtx/error.hpp"

namespace mtx {

namespace {

constexpr real kLeak = real(0.2);

Tensor conv_block(const Tensor& x, const ConvLayer& layer, int stride) {
    return leaky_relu(conv2d(x, layer.kernel, layer.bias, stride, 1), kLeak);
}

void check_image(const Tensor& img, int divisor) {
    if (img.rank() != 3 || img.dim(0) != 3) throw DimError("expected a (3,H,W) image, got " + shape_str(img.shape()));
    if (img.dim(1) != img.dim(2) || img.dim(1) % divisor != 0)
        throw DimError("image resolution " + std::to_string(img.dim(1)) + " is not square and divisible by " +
                       std::to_string(divisor));
}

ImageFeatures flatten_grid(const Tensor& x) {
    ImageFeatures f;
    f.height = x.dim(1);
    f.width = x.dim(2);
    f.v = reshape(x, {x.dim(0), f.height * f.width});
    return f;
}

Tensor mean_over_regions(const Tensor& flat) {
    return mul_scalar(sum(flat, 1), real(1) / real(flat.dim(1)));
}

// d as a (C, L) matrix with the vector repeated in every column.
Tensor tile_cols(const Tensor& d, int cols) {
    return matmul(reshape(d, {static_cast<int>(d.numel()), 1}), Tensor::ones({1, cols}));
}

}  // namespace

Tensor pooled_features(const ImageFeatures& f) { return mean_over_regions(f.v); }

ConvLayer conv_layer_init(int out_ch, int in_ch, int ksize, Rng& rng, real weight_scale, real bias_value) {
    const real bound = weight_scale / std::sqrt(real(ksize * ksize * in_ch));
    ConvLayer layer;
    layer.kernel = Tensor::uniform({out_ch, in_ch, ksize, ksize}, rng, -bound, bound);
    layer.bias = Tensor::full({out_ch}, bias_value);
    return layer;
}

void NetDims::validate() const {
    if (resolution < 32 || resolution % 32 != 0)
        throw ConfigError("resolution must be a positive multiple of 32, got " + std::to_string(resolution));
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    for (int c : sem_channels)
        if (c <= 0) throw ConfigError("semantic encoder channels must be positive");
    for (int c : detail_channels)
        if (c <= 0) throw ConfigError("detail encoder channels must be positive");
    for (int c : disc_channels)
        if (c <= 0) throw ConfigError("discriminator channels must be positive");
    if (embed_dim <= 0 || gru_hidden <= 0 || ca_dim <= 0 || gen_width <= 0)
        throw ConfigError("network widths must be positive");
    if (sem_channels[3] != text_dim())
        throw ConfigError("semantic channels must end at the text feature width " +
                          std::to_string(text_dim()) + ", got " + std::to_string(sem_channels[3]));
}

SemanticEncoderParams SemanticEncoderParams::init(const NetDims& dims, Rng& rng) {
    SemanticEncoderParams p;
    int in = 3;
    for (int i = 0; i < 4; ++i) {
        p.blocks[i] = conv_layer_init(dims.sem_channels[i], in, 3, rng);
        in = dims.sem_channels[i];
    }
    return p;
}

void SemanticEncoderParams::collect(NamedParams& out, const std::string& prefix) const {
    for (size_t i = 0; i < blocks.size(); ++i) {
        add_param(out, prefix + "/b" + std::to_string(i) + "/kernel", blocks[i].kernel);
        add_param(out, prefix + "/b" + std::to_string(i) + "/bias", blocks[i].bias);
    }
}

ImageFeatures encode_semantic(const Tensor& img, const SemanticEncoderParams& params) {
    check_image(img, 8);
    Tensor x = conv_block(img, params.blocks[0], 1);
    for (int i = 1; i < 4; ++i) x = conv_block(x, params.blocks[i], 2);
    return flatten_grid(x);
}

DetailEncoderParams DetailEncoderParams::init(const NetDims& dims, Rng& rng) {
    DetailEncoderParams p;
    int in = 3;
    for (int i = 0; i < 2; ++i) {
        p.blocks[i] = conv_layer_init(dims.detail_channels[i], in, 3, rng);
        in = dims.detail_channels[i];
    }
    return p;
}

void DetailEncoderParams::collect(NamedParams& out, const std::string& prefix) const {
    for (size_t i = 0; i < blocks.size(); ++i) {
        add_param(out, prefix + "/b" + std::to_string(i) + "/kernel", blocks[i].kernel);
        add_param(out, prefix + "/b" + std::to_string(i) + "/bias", blocks[i].bias);
    }
}

ImageFeatures encode_detail(const Tensor& img, const DetailEncoderParams& params) {
    check_image(img, 4);
    Tensor x = conv_block(img, params.blocks[0], 2);
    x = conv_block(x, params.blocks[1], 2);
    return flatten_grid(x);
}

Tensor detail_activation(const Tensor& img, const DetailEncoderParams& params, int layer) {
    if (layer < 1 || layer > 2)
        throw ConfigError("detail activation layer must be 1 or 2, got " + std::to_string(layer));
    check_image(img, 4);
    Tensor x = conv_block(img, params.blocks[0], 2);
    if (layer == 1) return x;
    return conv_block(x, params.blocks[1], 2);
}

Tensor acm(const Tensor& hidden, const Tensor& cond, const ConvLayer& w_head, const ConvLayer& b_head) {
    if (hidden.rank() != 3 || cond.rank() != 3) throw DimError("acm expects rank-3 feature grids");
    if (hidden.dim(1) != cond.dim(1) || hidden.dim(2) != cond.dim(2))
        throw DimError("acm grid mismatch: hidden " + shape_str(hidden.shape()) + " vs conditioning " +
                       shape_str(cond.shape()));
    const Tensor scale = conv2d(cond, w_head.kernel, w_head.bias, 1, 0);
    const Tensor shift = conv2d(cond, b_head.kernel, b_head.bias, 1, 0);
    if (scale.dim(0) != hidden.dim(0))
        throw DimError("acm heads produce " + std::to_string(scale.dim(0)) + " channels, hidden has " +
                       std::to_string(hidden.dim(0)));
    return mul(hidden, scale) + shift;
}

SpatialAttnResult spatial_attention(const Tensor& hidden, const Tensor& words, const Tensor& proj) {
    if (hidden.rank() != 3) throw DimError("spatial_attention expects a rank-3 hidden grid");
    if (words.rank() != 2 || proj.rank() != 2 || proj.dim(1) != words.dim(0))
        throw DimError("word projection " + shape_str(proj.shape()) + " does not accept words " +
                       shape_str(words.shape()));
    if (proj.dim(0) != hidden.dim(0))
        throw DimError("projected words have " + std::to_string(proj.dim(0)) + " channels, hidden has " +
                       std::to_string(hidden.dim(0)));
    const int c = hidden.dim(0), h = hidden.dim(1), w = hidden.dim(2);
    const Tensor pw = matmul(proj, words);                       // (C, L)
    const Tensor hf = reshape(hidden, {c, h * w});               // (C, R)
    const Tensor scores = matmul(transpose(hf), pw);             // (R, L)
    const Tensor weights = softmax(scores, 1);                   // rows sum to 1
    const Tensor ctx = matmul(pw, transpose(weights));           // (C, R)
    return {reshape(ctx, {c, h, w}), weights};
}

ChannelAttnResult channel_attention(const Tensor& hidden, const Tensor& words, const Tensor& proj) {
    if (hidden.rank() != 3) throw DimError("channel_attention expects a rank-3 hidden grid");
    if (words.rank() != 2 || proj.rank() != 2 || proj.dim(1) != words.dim(0))
        throw DimError("word projection " + shape_str(proj.shape()) + " does not accept words " +
                       shape_str(words.shape()));
    if (proj.dim(0) != hidden.dim(0))
        throw DimError("projected words have " + std::to_string(proj.dim(0)) + " channels, hidden has " +
                       std::to_string(hidden.dim(0)));
    const int c = hidden.dim(0), h = hidden.dim(1), w = hidden.dim(2);
    const int l = words.dim(1);
    const Tensor pw = matmul(proj, words);                          // (C, L)
    const Tensor desc = mean_over_regions(reshape(hidden, {c, h * w}));
    const Tensor scores = mul(tile_cols(desc, l), pw);              // channel-word scores
    const Tensor weights = softmax(scores, 1);                      // rows sum to 1
    const Tensor content = sum(mul(weights, pw), 1);                // (C)
    const Tensor gate = sigmoid(content);
    return {mul(hidden, tile_spatial(gate, h, w)), weights};
}

GeneratorParams GeneratorParams::init(const NetDims& dims, Rng& rng) {
    dims.validate();
    GeneratorParams g;
    g.text = TextEncoderParams::init(dims.vocab_size, dims.embed_dim, dims.gru_hidden, rng);
    g.ca = CondAugmentParams::init(dims.text_dim(), dims.ca_dim, rng);
    g.sem = SemanticEncoderParams::init(dims, rng);
    g.detail = DetailEncoderParams::init(dims, rng);
    const int cat = dims.sem_channels[3] + dims.ca_dim;
    const int w = dims.gen_width;
    g.start = conv_layer_init(w, cat, 3, rng);
    g.fuse_cond = conv_layer_init(w, cat, 1, rng);
    for (auto& s : g.stages) {
        s.res1 = conv_layer_init(w, w, 3, rng);
        s.res2 = conv_layer_init(w, w, 3, rng);
        // Modulation starts near identity: W(x) about 1, b(x) about 0.
        s.acm_w = conv_layer_init(w, w, 1, rng, real(0.1), real(1));
        s.acm_b = conv_layer_init(w, w, 1, rng, real(0.1));
        const real bound = real(1) / std::sqrt(real(dims.text_dim()));
        s.attn_u = Tensor::uniform({w, dims.text_dim()}, rng, -bound, bound);
        s.attn_fuse = conv_layer_init(w, 2 * w, 1, rng);
        s.chan_v = Tensor::uniform({w, dims.text_dim()}, rng, -bound, bound);
    }
    g.final_acm_w = conv_layer_init(w, dims.detail_channels[1], 1, rng, real(0.1), real(1));
    g.final_acm_b = conv_layer_init(w, dims.detail_channels[1], 1, rng, real(0.1));
    g.head1 = conv_layer_init(16, w, 3, rng);
    g.head2 = conv_layer_init(3, 16, 3, rng);
    return g;
}

namespace {

void collect_conv(NamedParams& out, const std::string& prefix, const ConvLayer& layer) {
    add_param(out, prefix + "/kernel", layer.kernel);
    add_param(out, prefix + "/bias", layer.bias);
}

}  // namespace

NamedParams GeneratorParams::trainable() const {
    NamedParams out;
    ca.collect(out, "ca");
    detail.collect(out, "detail");
    collect_conv(out, "gen/start", start);
    collect_conv(out, "gen/fuse", fuse_cond);
    for (size_t i = 0; i < stages.size(); ++i) {
        const std::string p = "gen/s" + std::to_string(i);
        collect_conv(out, p + "/res1", stages[i].res1);
        collect_conv(out, p + "/res2", stages[i].res2);
        collect_conv(out, p + "/acm_w", stages[i].acm_w);
        collect_conv(out, p + "/acm_b", stages[i].acm_b);
        add_param(out, p + "/attn_u", stages[i].attn_u);
        collect_conv(out, p + "/attn_fuse", stages[i].attn_fuse);
        add_param(out, p + "/chan_v", stages[i].chan_v);
    }
    collect_conv(out, "gen/final_acm_w", final_acm_w);
    collect_conv(out, "gen/final_acm_b", final_acm_b);
    collect_conv(out, "gen/head1", head1);
    collect_conv(out, "gen/head2", head2);
    return out;
}

NamedParams GeneratorParams::all() const {
    NamedParams out;
    text.collect(out, "text");
    sem.collect(out, "sem");
    NamedParams rest = trainable();
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

GenResult generate_full(const Tensor& img, const TokenSeq& tokens, const GeneratorParams& params,
                        Rng& rng, const GenOptions& options) {
    const ImageFeatures sem_feats = encode_semantic(img, params.sem);
    const Tensor sem_sp = reshape(sem_feats.v, {sem_feats.v.dim(0), sem_feats.height, sem_feats.width});
    const TextFeatures tf = encode_text(tokens, params.text);
    CondAugmentOut ca_out = conditioning_augment(tf.sentence, params.ca, rng, options.deterministic);
    const Tensor code_sp = tile_spatial(ca_out.code, sem_feats.height, sem_feats.width);
    const Tensor cat = concat({sem_sp, code_sp}, 0);

    Tensor h = relu(conv2d(cat, params.start.kernel, params.start.bias, 1, 1));
    Tensor f = conv2d(cat, params.fuse_cond.kernel, params.fuse_cond.bias, 1, 0);

    GenResult out;
    for (const GenStageParams& s : params.stages) {
        Tensor r = relu(conv2d(h, s.res1.kernel, s.res1.bias, 1, 1));
        r = conv2d(r, s.res2.kernel, s.res2.bias, 1, 1);
        h = relu(h + r);
        if (!options.acm_identity) h = acm(h, f, s.acm_w, s.acm_b);
        if (!options.bypass_attention) {
            SpatialAttnResult sa = spatial_attention(h, tf.words, s.attn_u);
            out.attention.push_back(sa.weights);
            h = relu(conv2d(concat({h, sa.context}, 0), s.attn_fuse.kernel, s.attn_fuse.bias, 1, 0));
            h = channel_attention(h, tf.words, s.chan_v).gated;
        }
        h = upsample_nearest2x(h);
        f = upsample_nearest2x(f);
    }

    const ImageFeatures det = encode_detail(img, params.detail);
    const Tensor det_sp = reshape(det.v, {det.v.dim(0), det.height, det.width});
    if (!options.acm_identity) h = acm(h, upsample_nearest2x(det_sp), params.final_acm_w, params.final_acm_b);

    h = relu(conv2d(h, params.head1.kernel, params.head1.bias, 1, 1));
    h = upsample_nearest2x(h);
    out.image = tanh(conv2d(h, params.head2.kernel, params.head2.bias, 1, 1));
    out.ca_mu = ca_out.mu;
    out.ca_log_sigma = ca_out.log_sigma;
    return out;
}

Tensor generate(const Tensor& img, const TokenSeq& tokens, const GeneratorParams& params, Rng& rng,
                const GenOptions& options) {
    return generate_full(img, tokens, params, rng, options).image;
}

DiscriminatorParams DiscriminatorParams::init(const NetDims& dims, Rng& rng) {
    dims.validate();
    DiscriminatorParams d;
    int in = 3;
    for (int i = 0; i < 3; ++i) {
        d.body[i] = conv_layer_init(dims.disc_channels[i], in, 3, rng);
        in = dims.disc_channels[i];
    }
    d.u_conv = conv_layer_init(in, in, 3, rng);
    d.u_fc_w = Tensor::uniform({1, in}, rng, -real(1) / std::sqrt(real(in)), real(1) / std::sqrt(real(in)));
    d.u_fc_b = Tensor::zeros({1});
    d.c_conv = conv_layer_init(in, in + dims.text_dim(), 3, rng);
    d.c_fc_w = Tensor::uniform({1, in}, rng, -real(1) / std::sqrt(real(in)), real(1) / std::sqrt(real(in)));
    d.c_fc_b = Tensor::zeros({1});
    return d;
}

NamedParams DiscriminatorParams::trainable() const {
    NamedParams out;
    for (size_t i = 0; i < body.size(); ++i) collect_conv(out, "disc/b" + std::to_string(i), body[i]);
    collect_conv(out, "disc/u_conv", u_conv);
    add_param(out, "disc/u_fc_w", u_fc_w);
    add_param(out, "disc/u_fc_b", u_fc_b);
    collect_conv(out, "disc/c_conv", c_conv);
    add_param(out, "disc/c_fc_w", c_fc_w);
    add_param(out, "disc/c_fc_b", c_fc_b);
    return out;
}

namespace {

Tensor disc_body(const Tensor& img, const DiscriminatorParams& params) {
    check_image(img, 8);
    Tensor x = img;
    for (const ConvLayer& layer : params.body) x = conv_block(x, layer, 2);
    return x;
}

Tensor disc_head(const Tensor& feats, const ConvLayer& conv, const Tensor& fc_w, const Tensor& fc_b) {
    const Tensor x = leaky_relu(conv2d(feats, conv.kernel, conv.bias, 1, 1), kLeak);
    const Tensor pooled = mean_over_regions(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
    return reshape(sigmoid(matmul(fc_w, pooled) + fc_b), {});
}

}  // namespace

Tensor discriminate(const Tensor& img, const DiscriminatorParams& params) {
    return disc_head(disc_body(img, params), params.u_conv, params.u_fc_w, params.u_fc_b);
}

Tensor discriminate(const Tensor& img, const Tensor* sentence, const DiscriminatorParams& params) {
    if (sentence == nullptr || !sentence->defined())
        throw StateError("conditional discriminator head called without a sentence embedding");
    if (sentence->rank() != 1)
        throw DimError("sentence embedding must be rank 1, got " + shape_str(sentence->shape()));
    const Tensor feats = disc_body(img, params);
    const Tensor tiled = tile_spatial(*sentence, feats.dim(1), feats.dim(2));
    return disc_head(concat({feats, tiled}, 0), params.c_conv, params.c_fc_w, params.c_fc_b);
}

}  // namespace mtx
