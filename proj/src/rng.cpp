#include "mtx/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mtx/error.hpp"

namespace mtx {

int Rng::uniform_int(int n) {
    if (n <= 0) throw StateError("Rng::uniform_int: n must be positive, got " + std::to_string(n));
    // Rejection sampling keeps the distribution exactly uniform.
    const uint64_t bound = n;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<int>(x % bound);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::string Rng::serialize() const {
    std::ostringstream out;
    out << engine_ << " " << (has_spare_ ? 1 : 0);
    if (has_spare_) {
        out << " ";
        out.precision(17);
        out << std::hexfloat << spare_;
    }
    return out.str();
}

Rng Rng::deserialize(const std::string& text) {
    Rng rng(0);
    std::istringstream in(text);
    int has_spare = 0;
    in >> rng.engine_ >> has_spare;
    if (in.fail()) throw IoError("Rng::deserialize: malformed state string");
    rng.has_spare_ = has_spare != 0;
    if (rng.has_spare_) {
        in >> std::hexfloat >> rng.spare_;
        if (in.fail()) throw IoError("Rng::deserialize: malformed spare value");
    }
    return rng;
}

uint64_t Rng::mix(uint64_t seed, uint64_t index) {
    // splitmix64 finalizer over the pair; decorrelates neighbouring indices.
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace mtx
