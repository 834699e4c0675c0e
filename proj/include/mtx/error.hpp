#pragma once

#include <stdexcept>
#include <string>

namespace mtx {

// Shape/extent violations (matmul mismatch, bad conv geometry, ...).
struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token not present in the vocabulary, or malformed vocabulary input.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: non-scalar backward, reuse of a consumed graph, missing inputs.
struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration file or field value.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf where finite values are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Divergence, NaN gradients, or a pretraining target that was not reached.
struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and serialization failures; carries the offending path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mtx
