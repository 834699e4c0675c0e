#include "mtx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/params.hpp"

namespace mtx {

namespace {

// Order-independent accumulation so the statistics commute with input
// shuffling exactly.
double stable_sum(std::vector<double>& vals) {
    std::sort(vals.begin(), vals.end());
    double s = 0;
    for (double v : vals) s += v;
    return s;
}

// Cyclic Jacobi for symmetric matrices; A is row-major n*n and is destroyed.
// Eigenvectors land in the columns of V.
void jacobi_eig(std::vector<double>& A, int n, std::vector<double>& w, std::vector<double>& V) {
    V.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) V[static_cast<size_t>(i) * n + i] = 1;
    auto a = [&](int r, int c) -> double& { return A[static_cast<size_t>(r) * n + c]; };
    auto v = [&](int r, int c) -> double& { return V[static_cast<size_t>(r) * n + c]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    w.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = a(i, i);
}

// Symmetric PSD square root; negative eigenvalues are clamped to zero.
std::vector<double> sqrtm_psd(std::vector<double> A, int n) {
    std::vector<double> w, V;
    jacobi_eig(A, n, w, V);
    std::vector<double> out(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int k = 0; k < n; ++k) {
                const double lam = std::max(0.0, w[static_cast<size_t>(k)]);
                s += V[static_cast<size_t>(i) * n + k] * std::sqrt(lam) * V[static_cast<size_t>(j) * n + k];
            }
            out[static_cast<size_t>(i) * n + j] = s;
        }
    return out;
}

std::vector<double> matmul_sq(const std::vector<double>& A, const std::vector<double>& B, int n) {
    std::vector<double> out(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double aik = A[static_cast<size_t>(i) * n + k];
            for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += aik * B[static_cast<size_t>(k) * n + j];
        }
    return out;
}

struct Gaussian {
    std::vector<double> mu;
    std::vector<double> cov;  // row-major d*d, unbiased
};

Gaussian fit_gaussian(const std::vector<Tensor>& feats, int d) {
    const size_t n = feats.size();
    Gaussian g;
    g.mu.resize(static_cast<size_t>(d));
    std::vector<double> column(n);
    for (int c = 0; c < d; ++c) {
        for (size_t i = 0; i < n; ++i) column[i] = static_cast<double>(feats[i].data()[static_cast<size_t>(c)]);
        g.mu[static_cast<size_t>(c)] = stable_sum(column) / static_cast<double>(n);
    }
    g.cov.assign(static_cast<size_t>(d) * d, 0);
    std::vector<double> prods(n);
    for (int r = 0; r < d; ++r) {
        for (int c = r; c < d; ++c) {
            for (size_t i = 0; i < n; ++i)
                prods[i] = (static_cast<double>(feats[i].data()[static_cast<size_t>(r)]) - g.mu[static_cast<size_t>(r)]) *
                           (static_cast<double>(feats[i].data()[static_cast<size_t>(c)]) - g.mu[static_cast<size_t>(c)]);
            const double cov = stable_sum(prods) / static_cast<double>(n - 1);
            if (!std::isfinite(cov)) throw NumericError("non-finite covariance while fitting features");
            g.cov[static_cast<size_t>(r) * d + c] = cov;
            g.cov[static_cast<size_t>(c) * d + r] = cov;
        }
    }
    return g;
}

}  // namespace

real fid_proxy(const std::vector<Tensor>& real_feats, const std::vector<Tensor>& fake_feats) {
    if (real_feats.size() < 2 || fake_feats.size() < 2)
        throw StateError("fid_proxy needs at least 2 samples per set");
    const int d = static_cast<int>(real_feats[0].numel());
    for (const auto& set : {&real_feats, &fake_feats})
        for (const Tensor& t : *set)
            if (t.rank() != 1 || static_cast<int>(t.numel()) != d)
                throw DimError("fid_proxy features must all be rank-1 of width " + std::to_string(d));

    const Gaussian r = fit_gaussian(real_feats, d);
    const Gaussian f = fit_gaussian(fake_feats, d);

    double mean_term = 0;
    for (int i = 0; i < d; ++i) {
        const double diff = r.mu[static_cast<size_t>(i)] - f.mu[static_cast<size_t>(i)];
        mean_term += diff * diff;
    }
    double tr_r = 0, tr_f = 0;
    for (int i = 0; i < d; ++i) {
        tr_r += r.cov[static_cast<size_t>(i) * d + i];
        tr_f += f.cov[static_cast<size_t>(i) * d + i];
    }

    const std::vector<double> s = sqrtm_psd(r.cov, d);
    std::vector<double> m = matmul_sq(matmul_sq(s, f.cov, d), s, d);
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double sym = (m[static_cast<size_t>(i) * d + j] + m[static_cast<size_t>(j) * d + i]) / 2;
            m[static_cast<size_t>(i) * d + j] = sym;
            m[static_cast<size_t>(j) * d + i] = sym;
        }
    std::vector<double> w, V;
    jacobi_eig(m, d, w, V);
    double tr_sqrt = 0;
    for (double lam : w) tr_sqrt += std::sqrt(std::max(0.0, lam));

    const double dist = mean_term + tr_r + tr_f - 2 * tr_sqrt;
    if (!std::isfinite(dist)) throw NumericError("fid_proxy produced a non-finite distance");
    return static_cast<real>(std::max(0.0, dist));
}

std::vector<EvalItem> prepare_eval_items(const Dataset& dataset, const Vocabulary& vocab) {
    std::vector<EvalItem> items;
    items.reserve(dataset.samples.size());
    for (const Sample& s : dataset.samples) {
        EvalItem item;
        item.sample = s;
        item.image = render(s.scene, dataset.resolution);
        item.tokens = tokenize(s.text, vocab);
        items.push_back(std::move(item));
    }
    return items;
}

namespace {

std::vector<Tensor> run_model(const std::vector<EvalItem>& items, const EditModel& model) {
    std::vector<Tensor> outputs;
    outputs.reserve(items.size());
    for (const EvalItem& item : items) outputs.push_back(model(item).detach());
    return outputs;
}

real attr_from_outputs(const std::vector<EvalItem>& items, const std::vector<Tensor>& outputs) {
    if (items.empty()) throw StateError("attribute_accuracy needs at least one item");
    int correct = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const Tensor& out = outputs[i];
        const int res = out.dim(1);
        const std::vector<uint8_t> mask = target_region_mask(items[i].sample.scene, res);
        const size_t plane = static_cast<size_t>(res) * res;
        std::array<real, 3> mean_rgb{0, 0, 0};
        size_t count = 0;
        for (size_t p = 0; p < plane; ++p) {
            if (!mask[p]) continue;
            ++count;
            for (int c = 0; c < 3; ++c) mean_rgb[static_cast<size_t>(c)] += out.data()[static_cast<size_t>(c) * plane + p];
        }
        if (count == 0) continue;
        for (int c = 0; c < 3; ++c) mean_rgb[static_cast<size_t>(c)] /= static_cast<real>(count);
        if (nearest_palette_color(mean_rgb) == items[i].sample.caption_scene.shape_color) ++correct;
    }
    return static_cast<real>(correct) / static_cast<real>(items.size());
}

std::pair<real, real> pres_mp_from_outputs(const std::vector<EvalItem>& items,
                                           const std::vector<Tensor>& outputs,
                                           const SemanticEncoderParams& sem,
                                           const TextEncoderParams& text) {
    if (items.empty()) throw StateError("preservation_and_mp needs at least one item");
    real pres_total = 0, mp_total = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const Tensor& in = items[i].image;
        const Tensor& out = outputs[i];
        if (in.shape() != out.shape())
            throw DimError("model output shape " + shape_str(out.shape()) + " does not match input " +
                           shape_str(in.shape()));
        const int res = in.dim(1);
        const std::vector<uint8_t> mask = target_region_mask(items[i].sample.scene, res);
        const size_t plane = static_cast<size_t>(res) * res;

        real sq = 0, l1 = 0;
        size_t outside = 0;
        for (size_t p = 0; p < plane; ++p) {
            const bool in_mask = mask[p] != 0;
            if (!in_mask) ++outside;
            for (int c = 0; c < 3; ++c) {
                const real d = in.data()[static_cast<size_t>(c) * plane + p] - out.data()[static_cast<size_t>(c) * plane + p];
                l1 += std::abs(d);
                if (!in_mask) sq += d * d;
            }
        }
        pres_total += outside > 0 ? sq / (real(3) * static_cast<real>(outside)) : real(0);
        l1 /= static_cast<real>(3 * plane);

        const Tensor pooled = l2_normalize(pooled_features(encode_semantic(out, sem)), 0);
        const Tensor sent = l2_normalize(encode_text(items[i].tokens, text).sentence, 0);
        const real cosine = sum(mul(pooled, sent)).item();
        mp_total += (real(1) - l1) * cosine;
    }
    const real n = static_cast<real>(items.size());
    return {pres_total / n, mp_total / n};
}

}  // namespace

real attribute_accuracy(const std::vector<EvalItem>& items, const EditModel& model) {
    return attr_from_outputs(items, run_model(items, model));
}

std::pair<real, real> preservation_and_mp(const std::vector<EvalItem>& items, const EditModel& model,
                                          const SemanticEncoderParams& sem,
                                          const TextEncoderParams& text) {
    return pres_mp_from_outputs(items, run_model(items, model), sem, text);
}

std::string EvalReport::to_json() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "{\n";
    out << "  \"fid_proxy\": " << fid << ",\n";
    out << "  \"attr_accuracy\": " << attr_accuracy << ",\n";
    out << "  \"preservation_mse\": " << preservation_mse << ",\n";
    out << "  \"mp\": " << mp << ",\n";
    out << "  \"samples\": " << samples << ",\n";
    out << "  \"gen_params\": " << gen_params << ",\n";
    out << "  \"disc_params\": " << disc_params << "\n";
    out << "}\n";
    return out.str();
}

EvalReport evaluate(const std::vector<EvalItem>& items, const GeneratorParams& gen,
                    const DiscriminatorParams& disc, int fid_samples) {
    if (items.size() < 2) throw StateError("evaluate needs at least 2 items");
    Rng rng(0);  // unused: generation runs deterministically
    GenOptions opt;
    opt.deterministic = true;
    const EditModel model = [&](const EvalItem& item) {
        return generate(item.image, item.tokens, gen, rng, opt);
    };
    const std::vector<Tensor> outputs = run_model(items, model);

    EvalReport report;
    report.samples = static_cast<int>(items.size());
    report.attr_accuracy = attr_from_outputs(items, outputs);
    const auto pm = pres_mp_from_outputs(items, outputs, gen.sem, gen.text);
    report.preservation_mse = pm.first;
    report.mp = pm.second;

    size_t fid_n = fid_samples > 0 ? std::min(items.size(), static_cast<size_t>(fid_samples)) : items.size();
    std::vector<Tensor> real_feats, fake_feats;
    for (size_t i = 0; i < fid_n; ++i) {
        real_feats.push_back(pooled_features(encode_semantic(items[i].image, gen.sem)).detach());
        fake_feats.push_back(pooled_features(encode_semantic(outputs[i], gen.sem)).detach());
    }
    report.fid = fid_proxy(real_feats, fake_feats);
    report.gen_params = param_count(gen.trainable());
    report.disc_params = param_count(disc.trainable());
    return report;
}

}  // namespace mtx
