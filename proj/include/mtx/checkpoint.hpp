#pragma once

#include <cstdint>
#include <string>

#include "mtx/config.hpp"
#include "mtx/params.hpp"
#include "mtx/train.hpp"

namespace mtx {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    uint32_t version = kCheckpointVersion;
    uint64_t config_digest = 0;
    std::string rng_state;
    int64_t step = 0;
    int32_t epoch = 0;
    int64_t g_opt_step = 0;
    int64_t d_opt_step = 0;
};

struct Checkpoint {
    CheckpointMeta meta;
    NamedParams tensors;
};

// Binary container: "MTXT" magic, u32 version, meta fields, named tensor
// table (name, dtype, shape, little-endian payload), "MTXE" sentinel.
// Layout is documented bit-exactly in docs/FORMATS.md. Writes are atomic;
// load of a truncated or trailing-garbage file is an IO error.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Full training state: model parameters, optimizer moments and counters,
// rng state, step/epoch. Loading rebuilds the session from the config's
// dimensions and warns on stderr when the stored config digest differs.
void save_session(const std::string& path, const TrainSession& session, uint64_t config_digest);
TrainSession load_session(const std::string& path, const Config& config, int vocab_size);

// Pretraining artifact: just the frozen text and semantic encoder tensors
// plus the rng state at the end of pretraining.
void save_pretrained(const std::string& path, const TrainSession& session, uint64_t config_digest);
// Overwrites session.gen.text / session.gen.sem and the session rng.
void load_pretrained(const std::string& path, TrainSession& session, uint64_t config_digest);

}  // namespace mtx
