#pragma once

#include <string>

#include "mtx/tensor.hpp"

namespace mtx {

// Binary PPM (P6), maxval 255. Pixel values in [-1, 1] map through
// round((x+1)/2 * 255) with round-half-away-from-zero, so x = 0.0 lands on
// byte 128; loading inverts with b/255*2-1, making save(load(f)) byte-stable.
void save_ppm(const std::string& path, const Tensor& image);
Tensor load_ppm(const std::string& path);

// Binary PGM (P5) for grayscale maps; values in [0, 1] map to round(v*255).
void save_pgm(const std::string& path, const Tensor& image);

}  // namespace mtx
