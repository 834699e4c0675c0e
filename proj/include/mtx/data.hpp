#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtx/rng.hpp"
#include "mtx/tensor.hpp"
#include "mtx/text.hpp"

namespace mtx {

enum class ShapeKind : uint8_t { kCircle = 0, kSquare = 1, kTriangle = 2 };

std::string shape_str(ShapeKind kind);
ShapeKind shape_from_str(const std::string& name);

struct PaletteColor {
    std::string name;
    std::array<real, 3> rgb;  // in [0, 1]
};

// The eight caption colors; indices are stable across runs.
const std::vector<PaletteColor>& palette();
int palette_index(const std::string& name);
// Nearest palette entry to an RGB triple given in [-1, 1].
int nearest_palette_color(const std::array<real, 3>& rgb);

// One shape over a flat background. Position and radius are in pixels of the
// nominal resolution; the shape (and background) colors index the palette
// and must differ.
struct SceneSpec {
    ShapeKind shape = ShapeKind::kCircle;
    int shape_color = 0;
    int bg_color = 1;
    int cx = 16, cy = 16;
    int radius = 8;

    void validate(int resolution) const;
};

// Deterministic anti-aliased rasterizer (4x4 supersampling); output is
// (3, res, res) in [-1, 1].
Tensor render(const SceneSpec& spec, int resolution);

// 1 where shape coverage >= 0.5, row-major (res*res); shares the rasterizer's
// coverage function so the mask matches the rendered shape exactly.
std::vector<uint8_t> target_region_mask(const SceneSpec& spec, int resolution);

// One of six caption templates, article chosen by vowel. Tokens stay within
// kMaxCaptionLen for every template.
std::string caption(const SceneSpec& spec, Rng& rng);
int caption_template_count();
std::string caption_with_template(const SceneSpec& spec, int template_id);

struct Sample {
    SceneSpec scene;          // rendered content
    SceneSpec caption_scene;  // scene the caption describes; equals scene when matched
    std::string text;
    bool matched = true;
};

struct Dataset {
    std::vector<Sample> samples;
    int resolution = 32;
    int size() const { return static_cast<int>(samples.size()); }
};

// Draws n scenes with fresh substreams per (seed, index), so any sample is
// reproducible independently of batch size. In mismatched mode the caption
// describes a copy of the scene whose shape color is resampled, so it is
// guaranteed to differ from the rendered shape color.
Dataset sample_batch(int n, bool matched, uint64_t seed, int resolution);

// Built-in closed vocabulary covering the caption templates plus the tagged
// words used in the documentation examples.
Vocabulary default_vocabulary();

// On-disk cache: manifest.txt plus one PPM per sample; see docs/FORMATS.md.
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

}  // namespace mtx
