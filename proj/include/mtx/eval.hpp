#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtx/data.hpp"
#include "mtx/nets.hpp"
#include "mtx/text.hpp"

namespace mtx {

// Frechet distance between Gaussian fits of two pooled feature sets:
// |mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^(1/2)), square root via
// symmetric eigendecomposition with eigenvalues clamped at zero.
real fid_proxy(const std::vector<Tensor>& real_feats, const std::vector<Tensor>& fake_feats);

struct EvalItem {
    Sample sample;
    Tensor image;    // render of sample.scene
    TokenSeq tokens; // tokenized caption
};

std::vector<EvalItem> prepare_eval_items(const Dataset& dataset, const Vocabulary& vocab);

// Any image-editing model under evaluation: item in, modified image out.
using EditModel = std::function<Tensor(const EvalItem&)>;

// Fraction of items whose mean output color inside the target-region mask is
// nearest to the caption-requested palette color.
real attribute_accuracy(const std::vector<EvalItem>& items, const EditModel& model);

// preservation_mse: pixel MSE outside the target mask between input and
// output. mp: (1 - L1(I, I')) * cosine(pooled semantic features of I',
// sentence embedding), averaged over items.
std::pair<real, real> preservation_and_mp(const std::vector<EvalItem>& items, const EditModel& model,
                                          const SemanticEncoderParams& sem,
                                          const TextEncoderParams& text);

struct EvalReport {
    real fid = 0;
    real attr_accuracy = 0;
    real preservation_mse = 0;
    real mp = 0;
    int samples = 0;
    int64_t gen_params = 0;
    int64_t disc_params = 0;

    std::string to_json() const;
};

// Runs the generator deterministically over the items and fills every
// metric. fid_samples 0 means the full item list.
EvalReport evaluate(const std::vector<EvalItem>& items, const GeneratorParams& gen,
                    const DiscriminatorParams& disc, int fid_samples = 0);

}  // namespace mtx
