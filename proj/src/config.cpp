#include "mtx/config.hpp"

#include <iomanip>
#include <limits>
#include <sstream>

#include "mtx/error.hpp"
#include "mtx/util.hpp"

namespace mtx {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* kind) {
    throw ConfigError("bad " + std::string(kind) + " for " + key + ": '" + value + "'");
}

int64_t parse_int(const std::string& key, const std::string& value) {
    size_t used = 0;
    int64_t v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        bad_value(key, value, "integer");
    }
    if (used != value.size()) bad_value(key, value, "integer");
    return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    size_t used = 0;
    uint64_t v = 0;
    try {
        v = std::stoull(value, &used);
    } catch (const std::exception&) {
        bad_value(key, value, "unsigned integer");
    }
    if (used != value.size() || value.find('-') != std::string::npos)
        bad_value(key, value, "unsigned integer");
    return v;
}

real parse_real(const std::string& key, const std::string& value) {
    size_t used = 0;
    double v = 0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        bad_value(key, value, "number");
    }
    if (used != value.size()) bad_value(key, value, "number");
    return static_cast<real>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "boolean");
}

template <size_t N>
std::array<int, N> parse_int_list(const std::string& key, const std::string& value) {
    std::array<int, N> out{};
    size_t start = 0, count = 0;
    while (true) {
        const size_t comma = value.find(',', start);
        const std::string piece = trim(value.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (count >= N) bad_value(key, value, "list (too many entries)");
        out[count++] = static_cast<int>(parse_int(key, piece));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (count != N)
        throw ConfigError("list for " + key + " needs " + std::to_string(N) + " entries, got " +
                          std::to_string(count));
    return out;
}

std::string fmt_real(real v) {
    std::ostringstream out;
    out << std::setprecision(std::numeric_limits<real>::max_digits10) << v;
    return out.str();
}

template <size_t N>
std::string fmt_list(const std::array<int, N>& vals) {
    std::ostringstream out;
    for (size_t i = 0; i < N; ++i) out << (i ? "," : "") << vals[i];
    return out.str();
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("malformed section header at line " + std::to_string(lineno) + ": " + t);
            section = t.substr(1, t.size() - 2);
            if (section != "data" && section != "net" && section != "pretrain" && section != "train" &&
                section != "eval" && section != "run")
                throw ConfigError("unknown section [" + section + "] at line " + std::to_string(lineno));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " + std::to_string(lineno) + ": " + t);
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (section.empty()) throw ConfigError("key '" + key + "' appears before any section");
        const std::string full = section + "." + key;

        if (section == "data") {
            if (key == "train_samples") cfg.train_samples = static_cast<int>(parse_int(full, value));
            else if (key == "test_samples") cfg.test_samples = static_cast<int>(parse_int(full, value));
            else if (key == "resolution") cfg.resolution = static_cast<int>(parse_int(full, value));
            else if (key == "mismatch") cfg.mismatch = parse_real(full, value);
            else throw ConfigError("unknown key '" + key + "' in section [data]");
        } else if (section == "net") {
            if (key == "embed_dim") cfg.dims.embed_dim = static_cast<int>(parse_int(full, value));
            else if (key == "gru_hidden") cfg.dims.gru_hidden = static_cast<int>(parse_int(full, value));
            else if (key == "ca_dim") cfg.dims.ca_dim = static_cast<int>(parse_int(full, value));
            else if (key == "sem_channels") cfg.dims.sem_channels = parse_int_list<4>(full, value);
            else if (key == "detail_channels") cfg.dims.detail_channels = parse_int_list<2>(full, value);
            else if (key == "gen_width") cfg.dims.gen_width = static_cast<int>(parse_int(full, value));
            else if (key == "disc_channels") cfg.dims.disc_channels = parse_int_list<3>(full, value);
            else throw ConfigError("unknown key '" + key + "' in section [net]");
        } else if (section == "pretrain") {
            if (key == "epochs") cfg.pretrain.epochs = static_cast<int>(parse_int(full, value));
            else if (key == "batch") cfg.pretrain.batch = static_cast<int>(parse_int(full, value));
            else if (key == "lr") cfg.pretrain.lr = parse_real(full, value);
            else if (key == "threshold") cfg.pretrain.threshold = parse_real(full, value);
            else if (key == "gamma1") cfg.pretrain.temps.gamma1 = parse_real(full, value);
            else if (key == "gamma2") cfg.pretrain.temps.gamma2 = parse_real(full, value);
            else if (key == "gamma3") cfg.pretrain.temps.gamma3 = parse_real(full, value);
            else throw ConfigError("unknown key '" + key + "' in section [pretrain]");
        } else if (section == "train") {
            if (key == "epochs") cfg.train.epochs = static_cast<int>(parse_int(full, value));
            else if (key == "batch") cfg.train.batch = static_cast<int>(parse_int(full, value));
            else if (key == "lr") cfg.train.adam.lr = parse_real(full, value);
            else if (key == "beta1") cfg.train.adam.beta1 = parse_real(full, value);
            else if (key == "beta2") cfg.train.adam.beta2 = parse_real(full, value);
            else if (key == "eps") cfg.train.adam.eps = parse_real(full, value);
            else if (key == "lambda1") cfg.train.weights.lambda1 = parse_real(full, value);
            else if (key == "lambda2") cfg.train.weights.lambda2 = parse_real(full, value);
            else if (key == "lambda3") cfg.train.weights.lambda3 = parse_real(full, value);
            else if (key == "lambda4") cfg.train.weights.lambda4 = parse_real(full, value);
            else if (key == "ca_kl") cfg.train.weights.ca_kl = parse_real(full, value);
            else if (key == "feedback") cfg.train.head = feedback_from_str(value);
            else if (key == "perceptual_layer") cfg.train.objective.perceptual_layer = static_cast<int>(parse_int(full, value));
            else if (key == "divergence_guard") cfg.train.divergence_guard = parse_real(full, value);
            else if (key == "eval_every") cfg.eval_every = static_cast<int>(parse_int(full, value));
            else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int>(parse_int(full, value));
            else if (key == "eval_samples") cfg.eval_samples = static_cast<int>(parse_int(full, value));
            else throw ConfigError("unknown key '" + key + "' in section [train]");
        } else if (section == "eval") {
            if (key == "fid_samples") cfg.fid_samples = static_cast<int>(parse_int(full, value));
            else throw ConfigError("unknown key '" + key + "' in section [eval]");
        } else {  // run
            if (key == "seed") cfg.seed = parse_u64(full, value);
            else if (key == "deterministic") cfg.deterministic = parse_bool(full, value);
            else if (key == "threads") cfg.threads = static_cast<int>(parse_int(full, value));
            else if (key == "out_dir") cfg.out_dir = value;
            else throw ConfigError("unknown key '" + key + "' in section [run]");
        }
    }
    // The matching temperatures also drive the generator's matching term.
    cfg.train.objective.temps = cfg.pretrain.temps;
    cfg.dims.resolution = cfg.resolution;
    cfg.validate();
    return cfg;
}

Config Config::load(const std::string& path) {
    try {
        return parse(read_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string Config::dump() const {
    std::ostringstream out;
    out << "[data]\n";
    out << "train_samples = " << train_samples << "\n";
    out << "test_samples = " << test_samples << "\n";
    out << "resolution = " << resolution << "\n";
    out << "mismatch = " << fmt_real(mismatch) << "\n";
    out << "\n[net]\n";
    out << "embed_dim = " << dims.embed_dim << "\n";
    out << "gru_hidden = " << dims.gru_hidden << "\n";
    out << "ca_dim = " << dims.ca_dim << "\n";
    out << "sem_channels = " << fmt_list(dims.sem_channels) << "\n";
    out << "detail_channels = " << fmt_list(dims.detail_channels) << "\n";
    out << "gen_width = " << dims.gen_width << "\n";
    out << "disc_channels = " << fmt_list(dims.disc_channels) << "\n";
    out << "\n[pretrain]\n";
    out << "epochs = " << pretrain.epochs << "\n";
    out << "batch = " << pretrain.batch << "\n";
    out << "lr = " << fmt_real(pretrain.lr) << "\n";
    out << "threshold = " << fmt_real(pretrain.threshold) << "\n";
    out << "gamma1 = " << fmt_real(pretrain.temps.gamma1) << "\n";
    out << "gamma2 = " << fmt_real(pretrain.temps.gamma2) << "\n";
    out << "gamma3 = " << fmt_real(pretrain.temps.gamma3) << "\n";
    out << "\n[train]\n";
    out << "epochs = " << train.epochs << "\n";
    out << "batch = " << train.batch << "\n";
    out << "lr = " << fmt_real(train.adam.lr) << "\n";
    out << "beta1 = " << fmt_real(train.adam.beta1) << "\n";
    out << "beta2 = " << fmt_real(train.adam.beta2) << "\n";
    out << "eps = " << fmt_real(train.adam.eps) << "\n";
    out << "lambda1 = " << fmt_real(train.weights.lambda1) << "\n";
    out << "lambda2 = " << fmt_real(train.weights.lambda2) << "\n";
    out << "lambda3 = " << fmt_real(train.weights.lambda3) << "\n";
    out << "lambda4 = " << fmt_real(train.weights.lambda4) << "\n";
    out << "ca_kl = " << fmt_real(train.weights.ca_kl) << "\n";
    out << "feedback = " << feedback_str(train.head) << "\n";
    out << "perceptual_layer = " << train.objective.perceptual_layer << "\n";
    out << "divergence_guard = " << fmt_real(train.divergence_guard) << "\n";
    out << "eval_every = " << eval_every << "\n";
    out << "checkpoint_every = " << checkpoint_every << "\n";
    out << "eval_samples = " << eval_samples << "\n";
    out << "\n[eval]\n";
    out << "fid_samples = " << fid_samples << "\n";
    out << "\n[run]\n";
    out << "seed = " << seed << "\n";
    out << "deterministic = " << (deterministic ? "true" : "false") << "\n";
    out << "threads = " << threads << "\n";
    out << "out_dir = " << out_dir << "\n";
    return out.str();
}

// The digest guards checkpoint resumption against semantic config drift, so
// the [run] section (seed, threads, out_dir) is left out of it.
uint64_t Config::digest() const {
    const std::string text = dump();
    const size_t run = text.find("\n[run]");
    return fnv1a64(run == std::string::npos ? text : text.substr(0, run));
}

void Config::validate() const {
    if (train_samples < 2) throw ConfigError("data.train_samples must be at least 2");
    if (test_samples < 2) throw ConfigError("data.test_samples must be at least 2");
    if (mismatch < 0 || mismatch > 1) throw ConfigError("data.mismatch must lie in [0, 1]");
    NetDims check = dims;
    check.resolution = resolution;
    check.vocab_size = 1;  // filled from the vocabulary later
    check.validate();
    if (pretrain.epochs < 1) throw ConfigError("pretrain.epochs must be positive");
    if (pretrain.batch < 2) throw ConfigError("pretrain.batch must be at least 2");
    if (pretrain.lr <= 0) throw ConfigError("pretrain.lr must be positive");
    if (pretrain.threshold <= 0 || pretrain.threshold > 1)
        throw ConfigError("pretrain.threshold must be in (0, 1]");
    if (pretrain.temps.gamma1 <= 0 || pretrain.temps.gamma2 <= 0 || pretrain.temps.gamma3 <= 0)
        throw ConfigError("pretrain temperatures must be positive");
    if (train.epochs < 0) throw ConfigError("train.epochs must not be negative");
    if (train.batch < 2) throw ConfigError("train.batch must be at least 2");
    if (train.adam.lr <= 0) throw ConfigError("train.lr must be positive");
    if (train.adam.beta1 < 0 || train.adam.beta1 >= 1) throw ConfigError("train.beta1 must be in [0, 1)");
    if (train.adam.beta2 < 0 || train.adam.beta2 >= 1) throw ConfigError("train.beta2 must be in [0, 1)");
    if (train.adam.eps <= 0) throw ConfigError("train.eps must be positive");
    if (train.weights.lambda1 < 0 || train.weights.lambda2 < 0 || train.weights.lambda3 < 0 ||
        train.weights.lambda4 < 0 || train.weights.ca_kl < 0)
        throw ConfigError("loss weights must not be negative");
    if (train.objective.perceptual_layer < 1 || train.objective.perceptual_layer > 2)
        throw ConfigError("train.perceptual_layer must be 1 or 2");
    if (train.divergence_guard <= 0) throw ConfigError("train.divergence_guard must be positive");
    if (eval_every < 0 || checkpoint_every < 0)
        throw ConfigError("train.eval_every and train.checkpoint_every must not be negative");
    if (eval_samples < 2) throw ConfigError("train.eval_samples must be at least 2");
    if (fid_samples < 0) throw ConfigError("eval.fid_samples must not be negative");
    if (threads < 1) throw ConfigError("run.threads must be at least 1");
    if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
}

}  // namespace mtx
