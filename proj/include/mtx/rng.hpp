#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mtx {

// Deterministic random source. All sampling goes through explicit transforms
// so that a given seed yields the same value stream on every run; the full
// state (engine + Box-Muller cache) serializes to text for checkpoints.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n);

    // Standard normal via Box-Muller; the spare value is cached.
    double normal();

    std::string serialize() const;
    static Rng deserialize(const std::string& text);

    // Stable substream derivation for per-sample generators.
    static uint64_t mix(uint64_t seed, uint64_t index);

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
               (!has_spare_ || spare_ == other.spare_);
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mtx
