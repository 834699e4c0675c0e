#include "mtx/params.hpp"

namespace mtx {

int64_t param_count(const NamedParams& params) {
    int64_t n = 0;
    for (const NamedTensor& p : params) n += static_cast<int64_t>(p.tensor.numel());
    return n;
}

void set_requires_grad(NamedParams& params, bool flag) {
    for (NamedTensor& p : params) p.tensor.set_requires_grad(flag);
}

void zero_grads(NamedParams& params) {
    for (NamedTensor& p : params) p.tensor.zero_grad();
}

NamedParams frozen_view(const NamedParams& params) {
    NamedParams out;
    out.reserve(params.size());
    for (const NamedTensor& p : params) out.push_back({p.name, p.tensor.detach()});
    return out;
}

}  // namespace mtx
