#include "mtx/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/image_io.hpp"
#include "mtx/util.hpp"

namespace mtx {

std::string shape_str(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::kCircle: return "circle";
        case ShapeKind::kSquare: return "square";
        default: return "triangle";
    }
}

ShapeKind shape_from_str(const std::string& name) {
    if (name == "circle") return ShapeKind::kCircle;
    if (name == "square") return ShapeKind::kSquare;
    if (name == "triangle") return ShapeKind::kTriangle;
    throw ConfigError("unknown shape: " + name);
}

const std::vector<PaletteColor>& palette() {
    static const std::vector<PaletteColor> colors = {
        {"red", {real(1.0), real(0.0), real(0.0)}},    {"yellow", {real(1.0), real(1.0), real(0.0)}},
        {"blue", {real(0.0), real(0.0), real(1.0)}},   {"green", {real(0.0), real(0.8), real(0.0)}},
        {"white", {real(1.0), real(1.0), real(1.0)}},  {"black", {real(0.0), real(0.0), real(0.0)}},
        {"brown", {real(0.55), real(0.27), real(0.07)}}, {"orange", {real(1.0), real(0.55), real(0.0)}},
    };
    return colors;
}

int palette_index(const std::string& name) {
    const auto& pal = palette();
    for (size_t i = 0; i < pal.size(); ++i)
        if (pal[i].name == name) return static_cast<int>(i);
    throw ConfigError("unknown palette color: " + name);
}

int nearest_palette_color(const std::array<real, 3>& rgb) {
    const auto& pal = palette();
    int best = 0;
    real best_d = real(1e30);
    for (size_t i = 0; i < pal.size(); ++i) {
        real d = 0;
        for (int c = 0; c < 3; ++c) {
            const real pc = pal[i].rgb[c] * real(2) - real(1);
            d += (rgb[c] - pc) * (rgb[c] - pc);
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(i);
        }
    }
    return best;
}

void SceneSpec::validate(int resolution) const {
    const int ncolors = static_cast<int>(palette().size());
    if (shape_color < 0 || shape_color >= ncolors || bg_color < 0 || bg_color >= ncolors)
        throw ConfigError("SceneSpec: color index out of range");
    if (shape_color == bg_color) throw ConfigError("SceneSpec: shape and background colors must differ");
    if (radius < 1) throw ConfigError("SceneSpec: radius must be at least 1");
    if (cx - radius < 0 || cx + radius > resolution || cy - radius < 0 || cy + radius > resolution)
        throw ConfigError("SceneSpec: shape exceeds the " + std::to_string(resolution) + "px frame");
}

namespace {

bool inside_shape(const SceneSpec& spec, double x, double y) {
    const double dx = x - spec.cx;
    const double dy = y - spec.cy;
    const double r = spec.radius;
    switch (spec.shape) {
        case ShapeKind::kCircle:
            return dx * dx + dy * dy <= r * r;
        case ShapeKind::kSquare:
            return std::max(std::abs(dx), std::abs(dy)) <= r;
        default: {
            // Upward triangle inscribed in the radius.
            const double ax = 0.0, ay = -r;
            const double bx = -0.8660254037844386 * r, by = 0.5 * r;
            const double cx2 = 0.8660254037844386 * r, cy2 = 0.5 * r;
            const double d1 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            const double d2 = (cx2 - bx) * (dy - by) - (cy2 - by) * (dx - bx);
            const double d3 = (ax - cx2) * (dy - cy2) - (ay - cy2) * (dx - cx2);
            const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(neg && pos);
        }
    }
}

// Fraction of 4x4 subsamples of pixel (px, py) inside the shape.
double coverage(const SceneSpec& spec, int px, int py) {
    int hits = 0;
    for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
            if (inside_shape(spec, px + (sx + 0.5) / 4.0, py + (sy + 0.5) / 4.0)) ++hits;
    return hits / 16.0;
}

}  // namespace

Tensor render(const SceneSpec& spec, int resolution) {
    spec.validate(resolution);
    const auto& fg = palette()[spec.shape_color].rgb;
    const auto& bg = palette()[spec.bg_color].rgb;
    const size_t plane = static_cast<size_t>(resolution) * resolution;
    std::vector<real> data(3 * plane);
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            const real cov = static_cast<real>(coverage(spec, x, y));
            const size_t i = static_cast<size_t>(y) * resolution + x;
            for (int c = 0; c < 3; ++c) {
                const real v = bg[c] + cov * (fg[c] - bg[c]);
                data[c * plane + i] = v * real(2) - real(1);
            }
        }
    }
    return Tensor::from({3, resolution, resolution}, std::move(data));
}

std::vector<uint8_t> target_region_mask(const SceneSpec& spec, int resolution) {
    spec.validate(resolution);
    std::vector<uint8_t> mask(static_cast<size_t>(resolution) * resolution, 0);
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x)
            if (coverage(spec, x, y) >= 0.5) mask[static_cast<size_t>(y) * resolution + x] = 1;
    return mask;
}

namespace {

std::string article(const std::string& word) {
    const char c = word.empty() ? 'x' : word[0];
    return (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? "an" : "a";
}

}  // namespace

int caption_template_count() { return 6; }

std::string caption_with_template(const SceneSpec& spec, int template_id) {
    const std::string c = palette()[spec.shape_color].name;
    const std::string b = palette()[spec.bg_color].name;
    const std::string s = shape_str(spec.shape);
    switch (template_id) {
        case 0: return article(c) + " " + c + " " + s + " on " + article(b) + " " + b + " background";
        case 1: return "the " + s + " is " + c + " and the background is " + b;
        case 2: return article(b) + " " + b + " background with " + article(c) + " " + c + " " + s;
        case 3: return "one " + c + " " + s + " over " + article(b) + " " + b + " background";
        case 4: return "this " + s + " is " + c + " on " + article(b) + " " + b + " background";
        case 5: return article(c) + " " + c + " " + s + " and " + article(b) + " " + b + " background";
        default: throw StateError("caption template id out of range: " + std::to_string(template_id));
    }
}

std::string caption(const SceneSpec& spec, Rng& rng) {
    return caption_with_template(spec, rng.uniform_int(caption_template_count()));
}

namespace {

SceneSpec draw_scene(Rng& rng, int resolution) {
    const int unit = resolution / 32;
    SceneSpec spec;
    spec.shape = static_cast<ShapeKind>(rng.uniform_int(3));
    spec.shape_color = rng.uniform_int(static_cast<int>(palette().size()));
    int bg = rng.uniform_int(static_cast<int>(palette().size()) - 1);
    if (bg >= spec.shape_color) ++bg;
    spec.bg_color = bg;
    static const int kPos[3] = {10, 16, 22};
    static const int kRadius[3] = {5, 7, 9};
    spec.cx = kPos[rng.uniform_int(3)] * unit;
    spec.cy = kPos[rng.uniform_int(3)] * unit;
    spec.radius = kRadius[rng.uniform_int(3)] * unit;
    return spec;
}

}  // namespace

Dataset sample_batch(int n, bool matched, uint64_t seed, int resolution) {
    if (n <= 0) throw StateError("sample_batch: n must be positive");
    if (resolution < 32 || resolution % 32 != 0)
        throw ConfigError("sample_batch: resolution must be a positive multiple of 32");
    Dataset out;
    out.resolution = resolution;
    out.samples.resize(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::mix(seed, static_cast<uint64_t>(i)));
        Sample& sample = out.samples[i];
        sample.scene = draw_scene(rng, resolution);
        sample.caption_scene = sample.scene;
        sample.matched = matched;
        if (!matched) {
            // Resample the shape color away from both original colors, so the
            // caption always contradicts the rendered shape color but stays a
            // valid scene.
            const int ncolors = static_cast<int>(palette().size());
            int pick = rng.uniform_int(ncolors - 2);
            for (int c = 0; c < ncolors; ++c) {
                if (c == sample.scene.shape_color || c == sample.scene.bg_color) continue;
                if (pick == 0) {
                    sample.caption_scene.shape_color = c;
                    break;
                }
                --pick;
            }
        }
        sample.text = caption(sample.caption_scene, rng);
    }
    return out;
}

Vocabulary default_vocabulary() {
    std::vector<VocabEntry> entries;
    for (const PaletteColor& c : palette()) entries.push_back({c.name, Pos::kAdj});
    for (const char* s : {"circle", "square", "triangle", "background"}) entries.push_back({s, Pos::kNoun});
    for (const char* s : {"a", "an", "on", "the", "is", "and", "with", "over", "one", "this", "has"})
        entries.push_back({s, Pos::kOther});
    // Tagged words used by the documentation examples.
    for (const char* s : {"bird", "head", "belly", "bus"}) entries.push_back({s, Pos::kNoun});
    return Vocabulary(std::move(entries));
}

void save_dataset(const std::string& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "resolution\t" << dataset.resolution << "\n";
    for (int i = 0; i < dataset.size(); ++i) {
        const Sample& s = dataset.samples[i];
        manifest << i << '\t' << shape_str(s.scene.shape) << '\t' << palette()[s.scene.shape_color].name
                 << '\t' << palette()[s.scene.bg_color].name << '\t' << s.scene.cx << '\t' << s.scene.cy
                 << '\t' << s.scene.radius << '\t' << (s.matched ? 1 : 0) << '\t'
                 << shape_str(s.caption_scene.shape) << '\t' << palette()[s.caption_scene.shape_color].name
                 << '\t' << palette()[s.caption_scene.bg_color].name << '\t' << s.text << '\n';
        save_ppm(dir + "/" + std::to_string(i) + ".ppm", render(s.scene, dataset.resolution));
    }
    atomic_write(dir + "/manifest.txt", manifest.str());
}

Dataset load_dataset(const std::string& dir) {
    const std::string text = read_file(dir + "/manifest.txt");
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError(dir + "/manifest.txt: empty manifest");
    Dataset out;
    {
        std::istringstream header(line);
        std::string key;
        header >> key >> out.resolution;
        if (key != "resolution" || out.resolution <= 0)
            throw IoError(dir + "/manifest.txt: malformed resolution header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        for (int f = 0; f < 11; ++f) {
            const size_t tab = line.find('\t', start);
            if (tab == std::string::npos) throw IoError(dir + "/manifest.txt: expected 12 fields per line");
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        fields.push_back(line.substr(start));
        Sample s;
        s.scene.shape = shape_from_str(fields[1]);
        s.scene.shape_color = palette_index(fields[2]);
        s.scene.bg_color = palette_index(fields[3]);
        s.scene.cx = std::stoi(fields[4]);
        s.scene.cy = std::stoi(fields[5]);
        s.scene.radius = std::stoi(fields[6]);
        s.matched = fields[7] == "1";
        s.caption_scene = s.scene;
        s.caption_scene.shape = shape_from_str(fields[8]);
        s.caption_scene.shape_color = palette_index(fields[9]);
        s.caption_scene.bg_color = palette_index(fields[10]);
        s.text = fields[11];
        s.scene.validate(out.resolution);
        s.caption_scene.validate(out.resolution);
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace mtx
