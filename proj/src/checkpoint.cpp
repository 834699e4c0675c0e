#include "mtx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <iostream>

#include "mtx/error.hpp"
#include "mtx/util.hpp"

namespace mtx {

namespace {

void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i64(std::string& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }
void put_i32(std::string& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }

struct Cursor {
    const std::string& data;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > data.size()) throw IoError("truncated checkpoint");
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(data[pos++]);
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(data[pos++])) << (8 * i);
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(data[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(data[pos++])) << (8 * i);
        return v;
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    std::string bytes(size_t n) {
        need(n);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

void put_real(std::string& out, real v) {
    if constexpr (sizeof(real) == 8) {
        put_u64(out, std::bit_cast<uint64_t>(static_cast<double>(v)));
    } else {
        put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
    }
}

real get_real(Cursor& c) {
    if constexpr (sizeof(real) == 8) {
        return static_cast<real>(std::bit_cast<double>(c.u64()));
    } else {
        return static_cast<real>(std::bit_cast<float>(c.u32()));
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out += "MTXT";
    put_u32(out, ckpt.meta.version);
    put_u64(out, ckpt.meta.config_digest);
    put_u32(out, static_cast<uint32_t>(ckpt.meta.rng_state.size()));
    out += ckpt.meta.rng_state;
    put_i64(out, ckpt.meta.step);
    put_i32(out, ckpt.meta.epoch);
    put_i64(out, ckpt.meta.g_opt_step);
    put_i64(out, ckpt.meta.d_opt_step);
    put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const NamedTensor& t : ckpt.tensors) {
        if (t.name.size() > 0xffff) throw IoError("tensor name too long: " + t.name);
        put_u16(out, static_cast<uint16_t>(t.name.size()));
        out += t.name;
        out.push_back(static_cast<char>(native_dtype()));
        out.push_back(static_cast<char>(t.tensor.rank()));
        for (int d : t.tensor.shape()) put_i32(out, d);
        for (real v : t.tensor.data()) put_real(out, v);
    }
    out += "MTXE";
    atomic_write(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    const std::string data = read_file(path);
    Cursor c{data};
    if (c.bytes(4) != "MTXT") throw IoError(path + ": not a checkpoint file (bad magic)");
    Checkpoint ckpt;
    ckpt.meta.version = c.u32();
    if (ckpt.meta.version != kCheckpointVersion)
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(ckpt.meta.version));
    ckpt.meta.config_digest = c.u64();
    ckpt.meta.rng_state = c.bytes(c.u32());
    ckpt.meta.step = c.i64();
    ckpt.meta.epoch = c.i32();
    ckpt.meta.g_opt_step = c.i64();
    ckpt.meta.d_opt_step = c.i64();
    const uint32_t count = c.u32();
    ckpt.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = c.bytes(c.u16());
        const uint8_t dtype = c.u8();
        if (dtype != static_cast<uint8_t>(native_dtype()))
            throw IoError(path + ": tensor " + name + " stored with dtype tag " + std::to_string(dtype) +
                          ", this build expects " + std::to_string(static_cast<int>(native_dtype())));
        const int rank = c.u8();
        Shape shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) {
            shape[static_cast<size_t>(d)] = c.i32();
            if (shape[static_cast<size_t>(d)] <= 0) throw IoError(path + ": bad dimension in tensor " + name);
        }
        const size_t n = numel_of(shape);
        std::vector<real> values(n);
        for (size_t j = 0; j < n; ++j) values[j] = get_real(c);
        ckpt.tensors.push_back({name, Tensor::from(shape, std::move(values))});
    }
    if (c.bytes(4) != "MTXE") throw IoError(path + ": missing end sentinel");
    if (c.pos != data.size()) throw IoError(path + ": trailing bytes after end sentinel");
    return ckpt;
}

namespace {

void append_moments(NamedParams& out, const char* side, const NamedParams& params, const AdamState& opt) {
    for (size_t i = 0; i < params.size(); ++i) {
        add_param(out, std::string("opt/") + side + "/m/" + params[i].name, opt.m[i]);
        add_param(out, std::string("opt/") + side + "/v/" + params[i].name, opt.v[i]);
    }
}

// name -> stored tensor, consuming entries so leftovers can be reported.
void restore_into(NamedParams& target, NamedParams& stored, const std::string& path) {
    for (NamedTensor& t : target) {
        bool found = false;
        for (NamedTensor& s : stored) {
            if (s.name != t.name) continue;
            if (s.tensor.shape() != t.tensor.shape())
                throw IoError(path + ": tensor " + t.name + " has shape " + shape_str(s.tensor.shape()) +
                              ", expected " + shape_str(t.tensor.shape()));
            std::span<real> dst = t.tensor.mutable_data();
            std::span<const real> src = s.tensor.data();
            std::copy(src.begin(), src.end(), dst.begin());
            s.name.clear();  // consumed
            found = true;
            break;
        }
        if (!found) throw IoError(path + ": checkpoint is missing tensor " + t.name);
    }
}

void freeze_encoders(GeneratorParams& gen) {
    NamedParams enc;
    gen.text.collect(enc, "text");
    gen.sem.collect(enc, "sem");
    set_requires_grad(enc, false);
}

TrainSession fresh_session(const Config& config, int vocab_size) {
    NetDims dims = config.dims;
    dims.resolution = config.resolution;
    dims.vocab_size = vocab_size;
    Rng init_rng(0);
    TrainSession s;
    s.gen = GeneratorParams::init(dims, init_rng);
    s.disc = DiscriminatorParams::init(dims, init_rng);
    s.g_opt = AdamState::init(s.gen.trainable(), config.train.adam);
    s.d_opt = AdamState::init(s.disc.trainable(), config.train.adam);
    freeze_encoders(s.gen);  // a session checkpoint only exists after pretraining
    return s;
}

void warn_digest(const std::string& path, uint64_t stored, uint64_t current) {
    if (stored != current)
        std::cerr << "warning: " << path << " was written under config digest " << stored
                  << ", current config digest is " << current << "\n";
}

}  // namespace

void save_session(const std::string& path, const TrainSession& session, uint64_t config_digest) {
    Checkpoint ckpt;
    ckpt.meta.config_digest = config_digest;
    ckpt.meta.rng_state = session.rng.serialize();
    ckpt.meta.step = session.step;
    ckpt.meta.epoch = session.epoch;
    ckpt.meta.g_opt_step = session.g_opt.step;
    ckpt.meta.d_opt_step = session.d_opt.step;
    ckpt.tensors = session.gen.all();
    NamedParams disc = session.disc.trainable();
    ckpt.tensors.insert(ckpt.tensors.end(), disc.begin(), disc.end());
    append_moments(ckpt.tensors, "g", session.gen.trainable(), session.g_opt);
    append_moments(ckpt.tensors, "d", session.disc.trainable(), session.d_opt);
    save_checkpoint(path, ckpt);
}

TrainSession load_session(const std::string& path, const Config& config, int vocab_size) {
    Checkpoint ckpt = load_checkpoint(path);
    warn_digest(path, ckpt.meta.config_digest, config.digest());

    TrainSession s = fresh_session(config, vocab_size);
    NamedParams model = s.gen.all();
    NamedParams disc = s.disc.trainable();
    model.insert(model.end(), disc.begin(), disc.end());
    restore_into(model, ckpt.tensors, path);

    NamedParams moments;
    append_moments(moments, "g", s.gen.trainable(), s.g_opt);
    append_moments(moments, "d", s.disc.trainable(), s.d_opt);
    restore_into(moments, ckpt.tensors, path);

    s.rng = Rng::deserialize(ckpt.meta.rng_state);
    s.step = ckpt.meta.step;
    s.epoch = ckpt.meta.epoch;
    s.g_opt.step = ckpt.meta.g_opt_step;
    s.d_opt.step = ckpt.meta.d_opt_step;
    return s;
}

void save_pretrained(const std::string& path, const TrainSession& session, uint64_t config_digest) {
    Checkpoint ckpt;
    ckpt.meta.config_digest = config_digest;
    ckpt.meta.rng_state = session.rng.serialize();
    session.gen.text.collect(ckpt.tensors, "text");
    session.gen.sem.collect(ckpt.tensors, "sem");
    save_checkpoint(path, ckpt);
}

void load_pretrained(const std::string& path, TrainSession& session, uint64_t config_digest) {
    Checkpoint ckpt = load_checkpoint(path);
    warn_digest(path, ckpt.meta.config_digest, config_digest);
    NamedParams target;
    session.gen.text.collect(target, "text");
    session.gen.sem.collect(target, "sem");
    restore_into(target, ckpt.tensors, path);
    set_requires_grad(target, false);
    session.rng = Rng::deserialize(ckpt.meta.rng_state);
}

}  // namespace mtx
