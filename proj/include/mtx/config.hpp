#pragma once

#include <cstdint>
#include <string>

#include "mtx/nets.hpp"
#include "mtx/objectives.hpp"
#include "mtx/train.hpp"

namespace mtx {

// Whole-run configuration. File format: sectioned key=value lines, full-line
// # comments, unknown sections or keys rejected by name. The canonical dump
// round-trips through parse and feeds the checkpoint digest.
struct Config {
    // [data]
    int train_samples = 2000;
    int test_samples = 400;
    int resolution = 32;
    real mismatch = real(0.5);  // fraction of training pairs drawn mismatched

    // [net]
    NetDims dims;  // vocab_size is filled from the vocabulary at runtime

    // [pretrain]
    PretrainConfig pretrain;

    // [train]
    TrainSettings train;
    int eval_every = 0;        // epochs between periodic evals, 0 disables
    int checkpoint_every = 10; // epochs between checkpoints, 0 = end only
    int eval_samples = 64;     // mismatched pairs per periodic eval

    // [eval]
    int fid_samples = 0;  // 0 = full test split

    // [run]
    uint64_t seed = 1;
    bool deterministic = false;
    int threads = 1;
    std::string out_dir = "out";

    static Config parse(const std::string& text);
    static Config load(const std::string& path);
    std::string dump() const;
    uint64_t digest() const;
    void validate() const;
};

}  // namespace mtx
