#pragma once

#include <array>
#include <string>
#include <vector>

#include "mtx/params.hpp"
#include "mtx/rng.hpp"
#include "mtx/tensor.hpp"
#include "mtx/text.hpp"

namespace mtx {

// Flattened spatial feature grid: v is (C, height*width).
struct ImageFeatures {
    Tensor v;
    int height = 0;
    int width = 0;
};

Tensor pooled_features(const ImageFeatures& f);  // mean over regions, (C)

struct ConvLayer {
    Tensor kernel;  // (O, I, k, k)
    Tensor bias;    // (O)
};

ConvLayer conv_layer_init(int out_ch, int in_ch, int ksize, Rng& rng, real weight_scale = 1.0,
                          real bias_value = 0.0);

struct NetDims {
    int resolution = 32;
    int vocab_size = 0;
    int embed_dim = 32;
    int gru_hidden = 32;  // word/sentence feature width is 2*gru_hidden
    int ca_dim = 32;
    std::array<int, 4> sem_channels{8, 16, 32, 64};
    std::array<int, 2> detail_channels{8, 16};
    int gen_width = 32;
    std::array<int, 3> disc_channels{8, 16, 32};

    int text_dim() const { return 2 * gru_hidden; }
    void validate() const;
};

// Coarse-grid feature extractor: one stride-1 and three stride-2 conv blocks,
// so a 32px image yields a 4x4 grid. Pretrained in the matching stage, then
// frozen; its features feed the generator, the word-level feedback chain,
// DAMSM and the evaluation metrics.
struct SemanticEncoderParams {
    std::array<ConvLayer, 4> blocks;

    static SemanticEncoderParams init(const NetDims& dims, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
};

ImageFeatures encode_semantic(const Tensor& img, const SemanticEncoderParams& params);

// Fine-grid feature extractor: two stride-2 conv blocks (8x8 grid at 32px).
// Trained jointly with the generator; also provides the activations for the
// perceptual loss.
struct DetailEncoderParams {
    std::array<ConvLayer, 2> blocks;

    static DetailEncoderParams init(const NetDims& dims, Rng& rng);
    void collect(NamedParams& out, const std::string& prefix) const;
};

ImageFeatures encode_detail(const Tensor& img, const DetailEncoderParams& params);
// Spatial activation after block `layer` (1 or 2); invalid layer is a config
// error.
Tensor detail_activation(const Tensor& img, const DetailEncoderParams& params, int layer);

// hidden * W(cond) + b(cond) with 1x1 conv heads over the conditioning grid.
Tensor acm(const Tensor& hidden, const Tensor& cond, const ConvLayer& w_head, const ConvLayer& b_head);

struct SpatialAttnResult {
    Tensor context;  // (C, H, W)
    Tensor weights;  // (H*W, L), rows sum to 1
};

// Per-region softmax over projected words; context_j = sum_i a_ij (U w_i).
SpatialAttnResult spatial_attention(const Tensor& hidden, const Tensor& words, const Tensor& proj);

struct ChannelAttnResult {
    Tensor gated;    // (C, H, W)
    Tensor weights;  // (C, L), rows sum to 1
};

// Per-channel softmax over projected words; channels rescaled by a sigmoid
// gate of the attended word content.
ChannelAttnResult channel_attention(const Tensor& hidden, const Tensor& words, const Tensor& proj);

struct GenStageParams {
    ConvLayer res1, res2;
    ConvLayer acm_w, acm_b;
    Tensor attn_u;  // (gen_width, text_dim)
    ConvLayer attn_fuse;
    Tensor chan_v;  // (gen_width, text_dim)
};

struct GeneratorParams {
    TextEncoderParams text;
    CondAugmentParams ca;
    SemanticEncoderParams sem;
    DetailEncoderParams detail;
    ConvLayer start;      // 3x3 over concat(semantic grid, tiled text code)
    ConvLayer fuse_cond;  // 1x1 producing the conditioning grid for the ACMs
    std::array<GenStageParams, 2> stages;
    ConvLayer final_acm_w, final_acm_b;  // heads over upsampled detail features
    ConvLayer head1, head2;

    static GeneratorParams init(const NetDims& dims, Rng& rng);
    // Parameters updated during adversarial training. The text and semantic
    // encoders stay frozen after pretraining and are excluded here.
    NamedParams trainable() const;
    NamedParams all() const;
};

struct GenOptions {
    bool deterministic = false;     // conditioning code = mu, no sampling
    bool acm_identity = false;      // skip all affine modulation (test mode)
    bool bypass_attention = false;  // skip both attentions (test mode)
};

struct GenResult {
    Tensor image;                   // (3, H, W) in [-1, 1]
    std::vector<Tensor> attention;  // per stage, (regions, L)
    Tensor ca_mu, ca_log_sigma;
};

GenResult generate_full(const Tensor& img, const TokenSeq& tokens, const GeneratorParams& params,
                        Rng& rng, const GenOptions& options = {});
Tensor generate(const Tensor& img, const TokenSeq& tokens, const GeneratorParams& params, Rng& rng,
                const GenOptions& options = {});

struct DiscriminatorParams {
    std::array<ConvLayer, 3> body;
    ConvLayer u_conv;
    Tensor u_fc_w, u_fc_b;  // (1, C), (1)
    ConvLayer c_conv;
    Tensor c_fc_w, c_fc_b;

    static DiscriminatorParams init(const NetDims& dims, Rng& rng);
    NamedParams trainable() const;
};

// Unconditional head; returns a rank-0 score in (0,1).
Tensor discriminate(const Tensor& img, const DiscriminatorParams& params);
// Conditional head; a null sentence is a state error.
Tensor discriminate(const Tensor& img, const Tensor* sentence, const DiscriminatorParams& params);

}  // namespace mtx
