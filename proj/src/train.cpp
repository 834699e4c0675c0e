#include "mtx/train.hpp"

#include <cmath>
#include <sstream>

#include "mtx/error.hpp"

namespace mtx {

AdamState AdamState::init(const NamedParams& params, const AdamConfig& config) {
    AdamState state;
    state.config = config;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const NamedTensor& p : params) {
        state.m.push_back(Tensor::zeros(p.tensor.shape()));
        state.v.push_back(Tensor::zeros(p.tensor.shape()));
    }
    return state;
}

void adam_step(NamedParams& params, AdamState& state) {
    if (params.size() != state.m.size())
        throw StateError("optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                         std::to_string(params.size()) + " parameters");
    state.step += 1;
    const AdamConfig& c = state.config;
    const real bc1 = real(1) - std::pow(c.beta1, real(state.step));
    const real bc2 = real(1) - std::pow(c.beta2, real(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        const bool has = p.has_grad();
        std::span<const real> g = has ? p.grad() : std::span<const real>();
        std::span<real> m = state.m[i].mutable_data();
        std::span<real> v = state.v[i].mutable_data();
        std::span<real> w = p.mutable_data();
        for (size_t j = 0; j < w.size(); ++j) {
            const real gj = has ? g[j] : real(0);
            if (!std::isfinite(gj))
                throw TrainError("non-finite gradient for parameter " + params[i].name);
            m[j] = c.beta1 * m[j] + (real(1) - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (real(1) - c.beta2) * gj * gj;
            w[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
        }
    }
}

namespace {

void check_divergence(const LossBreakdown& parts, real guard, const char* side, int64_t step) {
    const real values[] = {parts.uncond_adv, parts.cond_adv, parts.perceptual, parts.word, parts.damsm,
                           parts.total};
    const char* names[] = {"uncond_adv", "cond_adv", "perceptual", "word", "damsm", "total"};
    for (int i = 0; i < 6; ++i) {
        if (!std::isfinite(values[i]) || std::abs(values[i]) > guard) {
            std::ostringstream msg;
            msg << side << " " << names[i] << " = " << values[i] << " breached the divergence guard "
                << guard << " at step " << step;
            throw TrainError(msg.str());
        }
    }
}

}  // namespace

void train_epochs(TrainSession& session, const std::vector<GanBatchItem>& items,
                  const TrainSettings& settings, int until_epoch,
                  const std::function<void(const StepStats&)>& on_step) {
    if (items.size() < 2) throw StateError("training needs at least 2 items");
    if (settings.batch < 2) throw ConfigError("batch size must be at least 2");

    NamedParams gen_params = session.gen.trainable();
    NamedParams disc_params = session.disc.trainable();
    set_requires_grad(gen_params, true);
    set_requires_grad(disc_params, true);

    // The text encoder is frozen after pretraining, so per-item text features
    // are constants of the run.
    std::vector<TextFeatures> texts_all;
    texts_all.reserve(items.size());
    for (const GanBatchItem& item : items) texts_all.push_back(encode_text(item.tokens, session.gen.text));

    std::vector<size_t> order(items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    GenOptions gopt;
    gopt.deterministic = settings.objective.deterministic;

    for (int epoch = session.epoch; epoch < until_epoch; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(session.rng.uniform_int(static_cast<int>(i)))]);
        for (size_t start = 0; start + 2 <= order.size(); start += static_cast<size_t>(settings.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(settings.batch));
            if (end - start < 2) break;

            std::vector<GanBatchItem> chunk;
            std::vector<TextFeatures> chunk_texts;
            std::vector<GenResult> fakes;
            std::vector<Tensor> fake_values;
            for (size_t i = start; i < end; ++i) {
                chunk.push_back(items[order[i]]);
                chunk_texts.push_back(texts_all[order[i]]);
                fakes.push_back(generate_full(chunk.back().source, chunk.back().tokens, session.gen,
                                              session.rng, gopt));
                fake_values.push_back(fakes.back().image.detach());
            }

            zero_grads(disc_params);
            ObjectiveOut d_out = discriminator_objective(chunk, fake_values, chunk_texts, session.gen,
                                                         session.disc, settings.weights, settings.head,
                                                         settings.objective);
            check_divergence(d_out.parts, settings.divergence_guard, "discriminator", session.step);
            backward(d_out.loss);
            adam_step(disc_params, session.d_opt);

            zero_grads(gen_params);
            ObjectiveOut g_out = generator_objective(chunk, fakes, chunk_texts, session.gen, session.disc,
                                                     settings.weights, settings.head, settings.objective);
            check_divergence(g_out.parts, settings.divergence_guard, "generator", session.step);
            backward(g_out.loss);
            adam_step(gen_params, session.g_opt);

            session.step += 1;
            if (on_step) {
                StepStats stats;
                stats.step = session.step;
                stats.epoch = epoch;
                stats.d = d_out.parts;
                stats.g = g_out.parts;
                on_step(stats);
            }
        }
        session.epoch = epoch + 1;
    }
}

}  // namespace mtx
