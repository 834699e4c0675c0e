#include "mtx/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/util.hpp"

namespace mtx {

namespace {

unsigned char to_byte(real x, real lo, real hi) {
    const real unit = (x - lo) / (hi - lo);
    const long b = std::lround(static_cast<double>(unit) * 255.0);
    return static_cast<unsigned char>(std::clamp(b, 0L, 255L));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::string& text, size_t& pos) {
    while (pos < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[pos]))) {
            ++pos;
        } else if (text[pos] == '#') {
            while (pos < text.size() && text[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    const size_t start = pos;
    while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    return text.substr(start, pos - start);
}

}  // namespace

void save_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw DimError("save_ppm: expected (3,H,W), got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<size_t>(3) * h * w);
    const auto v = image.data();
    const size_t plane = static_cast<size_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            out.push_back(static_cast<char>(to_byte(v[i], real(-1), real(1))));
            out.push_back(static_cast<char>(to_byte(v[plane + i], real(-1), real(1))));
            out.push_back(static_cast<char>(to_byte(v[2 * plane + i], real(-1), real(1))));
        }
    atomic_write(path, out);
}

Tensor load_ppm(const std::string& path) {
    const std::string text = read_file(path);
    size_t pos = 0;
    if (next_token(text, pos) != "P6") throw IoError(path + ": not a binary PPM (P6) file");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token(text, pos));
        h = std::stoi(next_token(text, pos));
        maxval = std::stoi(next_token(text, pos));
    } catch (const std::exception&) {
        throw IoError(path + ": malformed PPM header");
    }
    if (w <= 0 || h <= 0) throw IoError(path + ": bad PPM dimensions");
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    ++pos;  // single whitespace byte after maxval
    const size_t need = static_cast<size_t>(3) * w * h;
    if (text.size() - pos < need) throw IoError(path + ": truncated PPM payload");
    std::vector<real> data(need);
    const size_t plane = static_cast<size_t>(h) * w;
    for (size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const auto b = static_cast<unsigned char>(text[pos + 3 * i + c]);
            data[c * plane + i] = static_cast<real>(b) / real(255) * real(2) - real(1);
        }
    }
    return Tensor::from({3, h, w}, std::move(data));
}

void save_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) throw DimError("save_pgm: expected (H,W), got " + shape_str(image.shape()));
    const int h = image.dim(0), w = image.dim(1);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (real x : image.data()) out.push_back(static_cast<char>(to_byte(x, real(0), real(1))));
    atomic_write(path, out);
}

}  // namespace mtx
