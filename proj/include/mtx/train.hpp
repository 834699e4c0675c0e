#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mtx/objectives.hpp"
#include "mtx/params.hpp"
#include "mtx/rng.hpp"

namespace mtx {

struct AdamConfig {
    real lr = real(2e-4);
    real beta1 = real(0.5);
    real beta2 = real(0.999);
    real eps = real(1e-8);
};

// Bias-corrected Adam. Moment tensors are plain values aligned with the
// parameter order, so checkpoints can carry them by name.
struct AdamState {
    AdamConfig config;
    int64_t step = 0;
    std::vector<Tensor> m, v;

    static AdamState init(const NamedParams& params, const AdamConfig& config);
};

// One update from the gradients currently on the parameters. A non-finite
// gradient raises a training error naming the parameter; missing gradients
// count as zero.
void adam_step(NamedParams& params, AdamState& state);

struct TrainSettings {
    int epochs = 30;
    int batch = 8;
    AdamConfig adam;
    LossWeights weights;
    FeedbackHead head = FeedbackHead::kWord;
    ObjectiveOptions objective;
    real divergence_guard = real(1e4);
};

struct StepStats {
    int64_t step = 0;
    int epoch = 0;
    LossBreakdown d, g;
};

// Live training state; everything here round-trips through checkpoints.
struct TrainSession {
    GeneratorParams gen;
    DiscriminatorParams disc;
    AdamState g_opt, d_opt;
    Rng rng{1};
    int64_t step = 0;
    int epoch = 0;  // completed epochs
};

// Runs epochs [session.epoch, until_epoch). Per step: one discriminator
// update on detached fakes, then one generator update through the updated
// discriminator. Any loss component beyond the divergence guard aborts.
// on_step may be empty; it sees every step's breakdown.
void train_epochs(TrainSession& session, const std::vector<GanBatchItem>& items,
                  const TrainSettings& settings, int until_epoch,
                  const std::function<void(const StepStats&)>& on_step);

}  // namespace mtx
