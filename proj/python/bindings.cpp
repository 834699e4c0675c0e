#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtx/checkpoint.hpp"
#include "mtx/config.hpp"
#include "mtx/data.hpp"
#include "mtx/error.hpp"
#include "mtx/eval.hpp"
#include "mtx/feedback.hpp"
#include "mtx/image_io.hpp"
#include "mtx/nets.hpp"
#include "mtx/tensor.hpp"
#include "mtx/text.hpp"

namespace py = pybind11;
using namespace mtx;

namespace {

using NpArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const NpArray& a) {
    Shape shape(static_cast<size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i)
        shape[static_cast<size_t>(i)] = static_cast<int>(a.shape(i));
    std::vector<real> data(static_cast<size_t>(a.size()));
    const double* p = a.data();
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<real>(p[i]);
    return Tensor::from(shape, std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    double* p = out.mutable_data();
    std::span<const real> src = t.data();
    for (size_t i = 0; i < src.size(); ++i) p[i] = static_cast<double>(src[i]);
    return out;
}

TokenSeq to_tokens(const std::vector<int>& ids) {
    TokenSeq t;
    t.ids = ids;
    return t;
}

std::vector<Tensor> rows_of(const NpArray& a) {
    if (a.ndim() != 2) throw DimError("expected a (samples, features) array");
    std::vector<Tensor> out;
    const int n = static_cast<int>(a.shape(0)), c = static_cast<int>(a.shape(1));
    const double* p = a.data();
    for (int i = 0; i < n; ++i) {
        std::vector<real> row(static_cast<size_t>(c));
        for (int j = 0; j < c; ++j) row[static_cast<size_t>(j)] = static_cast<real>(p[i * c + j]);
        out.push_back(Tensor::from({c}, std::move(row)));
    }
    return out;
}

// Scene description with palette colors by name; renders, masks and captions
// come out exactly as the dataset generator produces them.
struct PyScene {
    SceneSpec spec;

    PyScene(const std::string& shape, const std::string& shape_color, const std::string& bg_color, int cx,
            int cy, int radius) {
        spec.shape = shape_from_str(shape);
        spec.shape_color = palette_index(shape_color);
        spec.bg_color = palette_index(bg_color);
        spec.cx = cx;
        spec.cy = cy;
        spec.radius = radius;
    }

    py::array_t<double> render_image(int resolution) const {
        spec.validate(resolution);
        return to_array(render(spec, resolution));
    }

    py::array_t<uint8_t> mask(int resolution) const {
        spec.validate(resolution);
        std::vector<uint8_t> m = target_region_mask(spec, resolution);
        py::array_t<uint8_t> out({resolution, resolution});
        std::copy(m.begin(), m.end(), out.mutable_data());
        return out;
    }

    std::string caption(int template_id) const { return caption_with_template(spec, template_id); }
};

// A trained checkpoint wrapped for editing: deterministic conditioning, the
// frozen encoders, and the word-level view of any image.
struct Editor {
    Config config;
    Vocabulary vocab = default_vocabulary();
    TrainSession session;

    Editor(const std::string& checkpoint, const std::string& config_path) {
        if (!config_path.empty()) config = Config::load(config_path);
        session = load_session(checkpoint, config, vocab.size());
    }

    py::array_t<double> edit(const NpArray& image, const std::string& caption) const {
        const TokenSeq tokens = tokenize(caption, vocab);
        Rng rng(config.seed);
        GenOptions opt;
        opt.deterministic = true;
        return to_array(generate(to_tensor(image), tokens, session.gen, rng, opt));
    }

    py::array_t<double> presence(const NpArray& image, const std::string& caption) const {
        const TokenSeq tokens = tokenize(caption, vocab);
        const ImageFeatures f = encode_semantic(to_tensor(image), session.gen.sem);
        const TextFeatures t = encode_text(tokens, session.gen.text);
        const AttentionMaps maps = normalize_attention(correlate(t.words, f.v));
        return to_array(word_presence(f.v, maps.beta));
    }

    py::array_t<double> attention(const NpArray& image, const std::string& caption) const {
        const TokenSeq tokens = tokenize(caption, vocab);
        const ImageFeatures f = encode_semantic(to_tensor(image), session.gen.sem);
        const TextFeatures t = encode_text(tokens, session.gen.text);
        const AttentionMaps maps = normalize_attention(correlate(t.words, f.v));
        return to_array(reshape(maps.beta, {tokens.length(), f.height, f.width}));
    }

    std::vector<std::string> words(const std::string& caption) const {
        std::vector<std::string> out;
        for (int id : tokenize(caption, vocab).ids) out.push_back(vocab.token(id));
        return out;
    }

    int64_t gen_param_count() const { return param_count(session.gen.trainable()); }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Core operations of the text-guided shape editing workbench";

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_static("load", &Vocabulary::load, py::arg("path"))
        .def("save", &Vocabulary::save, py::arg("path"))
        .def("id", &Vocabulary::id, py::arg("token"))
        .def("token", &Vocabulary::token, py::arg("id"))
        .def("contains", &Vocabulary::contains, py::arg("token"))
        .def("pos", [](const Vocabulary& v, int id) { return pos_str(v.pos(id)); }, py::arg("id"))
        .def("__len__", &Vocabulary::size);

    m.def("default_vocabulary", &default_vocabulary, "the closed caption vocabulary");

    m.def(
        "tokenize",
        [](const std::string& caption, const Vocabulary& vocab) { return tokenize(caption, vocab).ids; },
        py::arg("caption"), py::arg("vocab"));
    m.def(
        "label_words",
        [](const std::vector<int>& ids, const Vocabulary& vocab) {
            return to_array(label_words(to_tokens(ids), vocab));
        },
        py::arg("ids"), py::arg("vocab"), "1 for nouns and adjectives, 0 elsewhere");

    py::class_<PyScene>(m, "Scene")
        .def(py::init<const std::string&, const std::string&, const std::string&, int, int, int>(),
             py::arg("shape"), py::arg("shape_color"), py::arg("bg_color"), py::arg("cx") = 16,
             py::arg("cy") = 16, py::arg("radius") = 8)
        .def("render", &PyScene::render_image, py::arg("resolution") = 32)
        .def("mask", &PyScene::mask, py::arg("resolution") = 32)
        .def("caption", &PyScene::caption, py::arg("template_id") = 0);

    m.def(
        "correlate",
        [](const NpArray& words, const NpArray& regions) {
            return to_array(correlate(to_tensor(words), to_tensor(regions)));
        },
        py::arg("words"), py::arg("regions"), "word/region correlation, (L, regions)");
    m.def(
        "attention_maps",
        [](const NpArray& correlation) {
            const AttentionMaps maps = normalize_attention(to_tensor(correlation));
            return py::make_tuple(to_array(maps.alpha), to_array(maps.beta));
        },
        py::arg("correlation"), "(alpha, beta): softmax over words, then over regions");
    m.def(
        "word_presence",
        [](const NpArray& regions, const NpArray& beta) {
            return to_array(word_presence(to_tensor(regions), to_tensor(beta)));
        },
        py::arg("regions"), py::arg("beta"), "distribution over words");
    m.def(
        "feedback_loss",
        [](const std::string& head, const NpArray& regions, const NpArray& words, const NpArray& labels) {
            return static_cast<double>(
                feedback_loss(feedback_from_str(head), to_tensor(regions), to_tensor(words), to_tensor(labels))
                    .item());
        },
        py::arg("head"), py::arg("regions"), py::arg("words"), py::arg("labels"),
        "word | tad | cd | none");

    m.def(
        "save_ppm", [](const std::string& path, const NpArray& image) { save_ppm(path, to_tensor(image)); },
        py::arg("path"), py::arg("image"), "binary P6, pixels in [-1, 1]");
    m.def(
        "load_ppm", [](const std::string& path) { return to_array(load_ppm(path)); }, py::arg("path"));

    m.def(
        "fid_proxy",
        [](const NpArray& real_feats, const NpArray& fake_feats) {
            return static_cast<double>(fid_proxy(rows_of(real_feats), rows_of(fake_feats)));
        },
        py::arg("real_feats"), py::arg("fake_feats"),
        "Frechet distance between Gaussian fits of two (samples, features) sets");

    py::class_<Editor>(m, "Editor")
        .def(py::init<const std::string&, const std::string&>(), py::arg("checkpoint"),
             py::arg("config") = std::string())
        .def("edit", &Editor::edit, py::arg("image"), py::arg("caption"))
        .def("presence", &Editor::presence, py::arg("image"), py::arg("caption"))
        .def("attention", &Editor::attention, py::arg("image"), py::arg("caption"))
        .def("words", &Editor::words, py::arg("caption"))
        .def_property_readonly("gen_param_count", &Editor::gen_param_count);
}
