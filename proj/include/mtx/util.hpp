#pragma once

#include <cstdint>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtx {

// Kernel-level worker count. Kernels only parallelize over disjoint output
// ranges with fixed-order inner accumulation, so results are bit-identical
// for every thread count.
int threads();
void set_threads(int n);

template <typename F>
void parallel_for(int n, F&& body) {
#ifdef _OPENMP
    if (threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(threads())
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (int i = 0; i < n; ++i) body(i);
}

// FNV-1a, used for config digests.
uint64_t fnv1a64(const std::string& text);

std::string read_file(const std::string& path);
// Writes to a sibling temp file, then renames over the target.
void atomic_write(const std::string& path, const std::string& data);

// Log levels are selected by the MTXT_LOG environment variable
// (error | info | debug); default is info.
enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };
LogLevel log_level();
void log_line(LogLevel level, const std::string& msg);

}  // namespace mtx
