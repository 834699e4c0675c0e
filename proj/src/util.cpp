#include "mtx/util.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtx/error.hpp"

namespace mtx {

namespace {
int g_threads = 1;
}

int threads() { return g_threads; }

void set_threads(int n) { g_threads = n < 1 ? 1 : n; }

uint64_t fnv1a64(const std::string& text) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream out;
    out << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path);
    return out.str();
}

void atomic_write(const std::string& path, const std::string& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open file for writing: " + tmp);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("MTXT_LOG");
        if (env == nullptr) return LogLevel::kInfo;
        if (std::strcmp(env, "error") == 0) return LogLevel::kError;
        if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
        return LogLevel::kInfo;
    }();
    return level;
}

void log_line(LogLevel level, const std::string& msg) {
    if (level > log_level()) return;
    const char* tag = level == LogLevel::kError ? "error" : level == LogLevel::kInfo ? "info" : "debug";
    std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

}  // namespace mtx
