#pragma once

#include <string>
#include <vector>

#include "mtx/tensor.hpp"

namespace mtx {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Ordered parameter registry; iteration order is insertion order so that
// optimizer sweeps and checkpoints are deterministic.
using NamedParams = std::vector<NamedTensor>;

inline void add_param(NamedParams& out, const std::string& name, const Tensor& t) {
    out.push_back({name, t});
}

int64_t param_count(const NamedParams& params);
void set_requires_grad(NamedParams& params, bool flag);
void zero_grads(NamedParams& params);

// Fresh requires-grad-free leaves sharing the current values; used where
// gradients must flow through a computation but not into its parameters.
NamedParams frozen_view(const NamedParams& params);

}  // namespace mtx
