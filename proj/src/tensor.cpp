#include "mtx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mtx/error.hpp"
#include "mtx/util.hpp"

namespace mtx {

size_t numel_of(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimError("extent must be positive in shape " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out << ",";
        out << shape[i];
    }
    out << ")";
    return out.str();
}

void TensorNode::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), real(0));
}

void TensorNode::accumulate(size_t i, real g) {
    ensure_grad();
    grad[i] += g;
}

namespace {

std::shared_ptr<TensorNode> make_value_node(Shape shape, std::vector<real> value) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    return node;
}

// Records the op on the tape only when some input carries gradients.
Tensor make_op(Shape shape, std::vector<real> value, const std::vector<Tensor>& inputs,
               std::function<void(TensorNode&)> bw) {
    auto node = make_value_node(std::move(shape), std::move(value));
    bool track = false;
    for (const Tensor& t : inputs) track = track || t.requires_grad();
    if (track) {
        node->requires_grad = true;
        for (const Tensor& t : inputs) {
            if (t.requires_grad()) node->parents.push_back(t.node_ptr());
        }
        node->backward_fn = std::move(bw);
    }
    return Tensor::wrap(std::move(node));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw StateError(std::string(op) + ": undefined tensor argument");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

bool is_scalar_shape(const Tensor& t) { return t.rank() == 0; }

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, real(0)); }

Tensor Tensor::ones(const Shape& shape) { return full(shape, real(1)); }

Tensor Tensor::full(const Shape& shape, real v) {
    return wrap(make_value_node(shape, std::vector<real>(numel_of(shape), v)));
}

Tensor Tensor::from(const Shape& shape, std::vector<real> data) {
    if (numel_of(shape) != data.size())
        throw DimError("Tensor::from: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(shape));
    return wrap(make_value_node(shape, std::move(data)));
}

Tensor Tensor::scalar(real v) { return wrap(make_value_node({}, std::vector<real>(1, v))); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, real stddev) {
    std::vector<real> data(numel_of(shape));
    for (real& x : data) x = static_cast<real>(rng.normal()) * stddev;
    return wrap(make_value_node(shape, std::move(data)));
}

Tensor Tensor::uniform(const Shape& shape, Rng& rng, real lo, real hi) {
    std::vector<real> data(numel_of(shape));
    for (real& x : data) x = static_cast<real>(rng.uniform(lo, hi));
    return wrap(make_value_node(shape, std::move(data)));
}

const Shape& Tensor::shape() const {
    if (!node_) throw StateError("shape(): undefined tensor");
    return node_->shape;
}

int Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw DimError("dim(): axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

size_t Tensor::numel() const {
    if (!node_) throw StateError("numel(): undefined tensor");
    return node_->numel();
}

std::span<const real> Tensor::data() const {
    if (!node_) throw StateError("data(): undefined tensor");
    return node_->value;
}

std::span<real> Tensor::mutable_data() {
    if (!node_) throw StateError("mutable_data(): undefined tensor");
    if (!node_->is_leaf())
        throw StateError("mutable_data(): only leaf tensors may be mutated in place");
    return node_->value;
}

real Tensor::item() const {
    if (numel() != 1) throw StateError("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

real Tensor::at(std::initializer_list<int> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size())
        throw DimError("at(): " + std::to_string(idx.size()) + " indices for " + shape_str(s));
    size_t flat = 0;
    int axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= s[axis]) throw DimError("at(): index out of range on axis " + std::to_string(axis));
        flat = flat * static_cast<size_t>(s[axis]) + static_cast<size_t>(i);
        ++axis;
    }
    return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!node_) throw StateError("set_requires_grad(): undefined tensor");
    if (!node_->is_leaf()) throw StateError("set_requires_grad(): only valid on leaf tensors");
    node_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const real> Tensor::grad() const {
    if (!has_grad()) throw StateError("grad(): no gradient accumulated");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

Tensor Tensor::detach() const {
    if (!node_) throw StateError("detach(): undefined tensor");
    return wrap(make_value_node(node_->shape, node_->value));
}

namespace {

// Shared elementwise binary core with rank-0 broadcast on either side.
template <typename FwdOp>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FwdOp fwd,
                 std::function<void(TensorNode&)> (*make_bw)(const Tensor&, const Tensor&)) {
    check_defined(a, name);
    check_defined(b, name);
    const bool sa = is_scalar_shape(a);
    const bool sb = is_scalar_shape(b);
    if (!sa && !sb) check_same_shape(a, b, name);
    const Tensor& shaped = sa ? b : a;
    const size_t n = shaped.numel();
    std::vector<real> out(n);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < n; ++i) fwd(out[i], av[sa ? 0 : i], bv[sb ? 0 : i]);
    return make_op(shaped.shape(), std::move(out), {a, b}, make_bw(a, b));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](real& o, real x, real y) { o = x + y; },
        +[](const Tensor& a, const Tensor& b) -> std::function<void(TensorNode&)> {
            auto an = a.node_ptr();
            auto bn = b.node_ptr();
            return [an, bn](TensorNode& self) {
                const size_t n = self.numel();
                if (an->requires_grad) {
                    if (an->numel() == 1 && n > 1) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i];
                        an->accumulate(0, acc);
                    } else {
                        an->ensure_grad();
                        for (size_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
                    }
                }
                if (bn->requires_grad) {
                    if (bn->numel() == 1 && n > 1) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i];
                        bn->accumulate(0, acc);
                    } else {
                        bn->ensure_grad();
                        for (size_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i];
                    }
                }
            };
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](real& o, real x, real y) { o = x - y; },
        +[](const Tensor& a, const Tensor& b) -> std::function<void(TensorNode&)> {
            auto an = a.node_ptr();
            auto bn = b.node_ptr();
            return [an, bn](TensorNode& self) {
                const size_t n = self.numel();
                if (an->requires_grad) {
                    if (an->numel() == 1 && n > 1) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i];
                        an->accumulate(0, acc);
                    } else {
                        an->ensure_grad();
                        for (size_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
                    }
                }
                if (bn->requires_grad) {
                    if (bn->numel() == 1 && n > 1) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i];
                        bn->accumulate(0, -acc);
                    } else {
                        bn->ensure_grad();
                        for (size_t i = 0; i < n; ++i) bn->grad[i] -= self.grad[i];
                    }
                }
            };
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](real& o, real x, real y) { o = x * y; },
        +[](const Tensor& a, const Tensor& b) -> std::function<void(TensorNode&)> {
            auto an = a.node_ptr();
            auto bn = b.node_ptr();
            return [an, bn](TensorNode& self) {
                const size_t n = self.numel();
                const bool sa = an->numel() == 1 && n > 1;
                const bool sb = bn->numel() == 1 && n > 1;
                if (an->requires_grad) {
                    if (sa) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i] * bn->value[sb ? 0 : i];
                        an->accumulate(0, acc);
                    } else {
                        an->ensure_grad();
                        for (size_t i = 0; i < n; ++i) an->grad[i] += self.grad[i] * bn->value[sb ? 0 : i];
                    }
                }
                if (bn->requires_grad) {
                    if (sb) {
                        real acc = 0;
                        for (size_t i = 0; i < n; ++i) acc += self.grad[i] * an->value[sa ? 0 : i];
                        bn->accumulate(0, acc);
                    } else {
                        bn->ensure_grad();
                        for (size_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i] * an->value[sa ? 0 : i];
                    }
                }
            };
        });
}

Tensor add_scalar(const Tensor& a, real s) {
    check_defined(a, "add_scalar");
    std::vector<real> out(a.data().begin(), a.data().end());
    for (real& x : out) x += s;
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, real s) {
    check_defined(a, "mul_scalar");
    std::vector<real> out(a.data().begin(), a.data().end());
    for (real& x : out) x *= s;
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {a}, [an, s](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i] * s;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || (b.rank() != 2 && b.rank() != 1))
        throw DimError("matmul: expected (M,K)x(K,N) or (M,K)x(K), got " + shape_str(a.shape()) +
                       " x " + shape_str(b.shape()));
    const int m = a.dim(0);
    const int k = a.dim(1);
    const bool vec = b.rank() == 1;
    const int kb = vec ? b.dim(0) : b.dim(0);
    const int n = vec ? 1 : b.dim(1);
    if (k != kb)
        throw DimError("matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    std::vector<real> out(static_cast<size_t>(m) * n, real(0));
    const auto av = a.data();
    const auto bv = b.data();
    parallel_for(m, [&](int i) {
        for (int p = 0; p < k; ++p) {
            const real x = av[static_cast<size_t>(i) * k + p];
            const real* brow = &bv[static_cast<size_t>(p) * n];
            real* orow = &out[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    });
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    Shape out_shape = vec ? Shape{m} : Shape{m, n};
    return make_op(std::move(out_shape), std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
            an->ensure_grad();
            parallel_for(m, [&](int i) {
                for (int p = 0; p < k; ++p) {
                    real acc = 0;
                    const real* grow = &g[static_cast<size_t>(i) * n];
                    const real* brow = &bn->value[static_cast<size_t>(p) * n];
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    an->grad[static_cast<size_t>(i) * k + p] += acc;
                }
            });
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            parallel_for(k, [&](int p) {
                for (int j = 0; j < n; ++j) {
                    real acc = 0;
                    for (int i = 0; i < m; ++i)
                        acc += an->value[static_cast<size_t>(i) * k + p] * g[static_cast<size_t>(i) * n + j];
                    bn->grad[static_cast<size_t>(p) * n + j] += acc;
                }
            });
        }
    });
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    if (a.rank() != 2) throw DimError("transpose: expected rank-2, got " + shape_str(a.shape()));
    const int m = a.dim(0);
    const int n = a.dim(1);
    std::vector<real> out(a.numel());
    const auto av = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    auto an = a.node_ptr();
    return make_op({n, m}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                an->grad[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    check_defined(a, "reshape");
    if (numel_of(shape) != a.numel())
        throw DimError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<real> out(a.data().begin(), a.data().end());
    auto an = a.node_ptr();
    return make_op(shape, std::move(out), {a}, [an](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw StateError("concat: no inputs");
    for (const Tensor& t : parts) check_defined(t, "concat");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw DimError("concat: axis " + std::to_string(axis) + " out of range");
    Shape out_shape = parts[0].shape();
    int axis_total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != rank) throw DimError("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d == axis) continue;
            if (t.dim(d) != out_shape[d])
                throw DimError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                               shape_str(parts[0].shape()) + " off axis " + std::to_string(axis));
        }
        axis_total += t.dim(axis);
    }
    out_shape[axis] = axis_total;
    size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(out_shape[d]);
    for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(out_shape[d]);
    std::vector<real> out(numel_of(out_shape));
    const size_t out_row = static_cast<size_t>(axis_total) * inner;
    size_t offset = 0;
    for (const Tensor& t : parts) {
        const size_t span = static_cast<size_t>(t.dim(axis)) * inner;
        const auto tv = t.data();
        for (size_t o = 0; o < outer; ++o)
            std::copy_n(&tv[o * span], span, &out[o * out_row + offset]);
        offset += span;
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<size_t> spans;
    for (const Tensor& t : parts) {
        nodes.push_back(t.node_ptr());
        spans.push_back(static_cast<size_t>(t.dim(axis)) * inner);
    }
    return make_op(std::move(out_shape), std::move(out), parts,
                   [nodes, spans, outer, out_row, inner](TensorNode& self) {
                       size_t offset = 0;
                       for (size_t p = 0; p < nodes.size(); ++p) {
                           const size_t span = spans[p];
                           if (nodes[p]->requires_grad) {
                               nodes[p]->ensure_grad();
                               for (size_t o = 0; o < outer; ++o)
                                   for (size_t i = 0; i < span; ++i)
                                       nodes[p]->grad[o * span + i] += self.grad[o * out_row + offset + i];
                           }
                           offset += span;
                       }
                   });
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
    if (cols.empty()) throw StateError("stack_cols: no inputs");
    for (const Tensor& t : cols) check_defined(t, "stack_cols");
    const int n = cols[0].rank() == 1 ? cols[0].dim(0) : -1;
    if (n < 0) throw DimError("stack_cols: expected rank-1 columns");
    const int k = static_cast<int>(cols.size());
    for (const Tensor& t : cols)
        if (t.rank() != 1 || t.dim(0) != n)
            throw DimError("stack_cols: column shape " + shape_str(t.shape()) + ", expected (" +
                           std::to_string(n) + ")");
    std::vector<real> out(static_cast<size_t>(n) * k);
    for (int j = 0; j < k; ++j) {
        const auto cv = cols[j].data();
        for (int i = 0; i < n; ++i) out[static_cast<size_t>(i) * k + j] = cv[i];
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor& t : cols) nodes.push_back(t.node_ptr());
    return make_op({n, k}, std::move(out), cols, [nodes, n, k](TensorNode& self) {
        for (int j = 0; j < k; ++j) {
            if (!nodes[j]->requires_grad) continue;
            nodes[j]->ensure_grad();
            for (int i = 0; i < n; ++i) nodes[j]->grad[i] += self.grad[static_cast<size_t>(i) * k + j];
        }
    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    check_defined(a, name);
    const size_t n = a.numel();
    std::vector<real> out(n);
    const auto av = a.data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {a}, [an, bwd](TensorNode& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.numel(); ++i)
            an->grad[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
    });
}

}  // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](real x) { return x > 0 ? x : real(0); },
        [](real x, real) { return x > 0 ? real(1) : real(0); });
}

Tensor leaky_relu(const Tensor& a, real slope) {
    return unary_op(
        a, "leaky_relu", [slope](real x) { return x > 0 ? x : slope * x; },
        [slope](real x, real) { return x > 0 ? real(1) : slope; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid",
        [](real x) { return x >= 0 ? real(1) / (real(1) + std::exp(-x)) : std::exp(x) / (real(1) + std::exp(x)); },
        [](real, real y) { return y * (real(1) - y); });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, "tanh", [](real x) { return std::tanh(x); },
        [](real, real y) { return real(1) - y * y; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, "exp", [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, "log", [](real x) { return std::log(x); }, [](real x, real) { return real(1) / x; });
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    real acc = 0;
    for (real x : a.data()) acc += x;
    auto an = a.node_ptr();
    return make_op({}, {acc}, {a}, [an](TensorNode& self) {
        an->ensure_grad();
        const real g = self.grad[0];
        for (size_t i = 0; i < an->numel(); ++i) an->grad[i] += g;
    });
}

Tensor sum(const Tensor& a, int axis) {
    check_defined(a, "sum");
    if (a.rank() != 2) throw DimError("sum(axis): expected rank-2, got " + shape_str(a.shape()));
    if (axis != 0 && axis != 1) throw DimError("sum(axis): axis must be 0 or 1");
    const int m = a.dim(0);
    const int n = a.dim(1);
    const auto av = a.data();
    std::vector<real> out(axis == 0 ? n : m, real(0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[axis == 0 ? j : i] += av[static_cast<size_t>(i) * n + j];
    auto an = a.node_ptr();
    return make_op({axis == 0 ? n : m}, std::move(out), {a}, [an, m, n, axis](TensorNode& self) {
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                an->grad[static_cast<size_t>(i) * n + j] += self.grad[axis == 0 ? j : i];
    });
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    const size_t n = a.numel();
    real acc = 0;
    for (real x : a.data()) acc += x;
    acc /= static_cast<real>(n);
    auto an = a.node_ptr();
    return make_op({}, {acc}, {a}, [an, n](TensorNode& self) {
        an->ensure_grad();
        const real g = self.grad[0] / static_cast<real>(n);
        for (size_t i = 0; i < n; ++i) an->grad[i] += g;
    });
}

namespace {

// Slice iteration shared by softmax and l2_normalize. For rank-1 there is a
// single slice; for rank-2 the slices run along `axis`.
struct SliceView {
    size_t count;   // number of slices
    size_t length;  // elements per slice
    size_t stride;  // distance between consecutive slice elements
    size_t step;    // distance between slice starts
};

SliceView slices_along(const Tensor& a, int axis, const char* op) {
    if (a.rank() == 1) {
        if (axis != 0) throw DimError(std::string(op) + ": axis must be 0 for rank-1");
        return {1, a.numel(), 1, 0};
    }
    if (a.rank() != 2) throw DimError(std::string(op) + ": expected rank-1 or rank-2, got " + shape_str(a.shape()));
    const size_t m = static_cast<size_t>(a.dim(0));
    const size_t n = static_cast<size_t>(a.dim(1));
    if (axis == 0) return {n, m, n, 1};   // slices vary down the rows
    if (axis == 1) return {m, n, 1, n};   // slices vary along each row
    throw DimError(std::string(op) + ": axis must be 0 or 1");
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
    check_defined(a, "softmax");
    const SliceView view = slices_along(a, axis, "softmax");
    const auto av = a.data();
    std::vector<real> out(a.numel());
    for (size_t s = 0; s < view.count; ++s) {
        const size_t base = s * view.step;
        real mx = av[base];
        for (size_t i = 1; i < view.length; ++i) mx = std::max(mx, av[base + i * view.stride]);
        real denom = 0;
        for (size_t i = 0; i < view.length; ++i) {
            const real e = std::exp(av[base + i * view.stride] - mx);
            out[base + i * view.stride] = e;
            denom += e;
        }
        for (size_t i = 0; i < view.length; ++i) out[base + i * view.stride] /= denom;
    }
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {a}, [an, view](TensorNode& self) {
        an->ensure_grad();
        for (size_t s = 0; s < view.count; ++s) {
            const size_t base = s * view.step;
            real dot = 0;
            for (size_t i = 0; i < view.length; ++i) {
                const size_t k = base + i * view.stride;
                dot += self.grad[k] * self.value[k];
            }
            for (size_t i = 0; i < view.length; ++i) {
                const size_t k = base + i * view.stride;
                an->grad[k] += self.value[k] * (self.grad[k] - dot);
            }
        }
    });
}

namespace {
constexpr real kBceEps = real(1e-7);
}

Tensor bce(const Tensor& pred, const Tensor& target) {
    check_defined(pred, "bce");
    check_defined(target, "bce");
    check_same_shape(pred, target, "bce");
    const size_t n = pred.numel();
    const auto pv = pred.data();
    const auto tv = target.data();
    real acc = 0;
    for (size_t i = 0; i < n; ++i) {
        const real p = std::clamp(pv[i], kBceEps, real(1) - kBceEps);
        acc += -tv[i] * std::log(p) - (real(1) - tv[i]) * std::log(real(1) - p);
    }
    acc /= static_cast<real>(n);
    auto pn = pred.node_ptr();
    auto tn = target.node_ptr();
    return make_op({}, {acc}, {pred, target}, [pn, tn, n](TensorNode& self) {
        const real g = self.grad[0] / static_cast<real>(n);
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                const real raw = pn->value[i];
                if (raw < kBceEps || raw > real(1) - kBceEps) continue;  // clamped region is flat
                pn->grad[i] += g * (raw - tn->value[i]) / (raw * (real(1) - raw));
            }
        }
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                const real p = std::clamp(pn->value[i], kBceEps, real(1) - kBceEps);
                tn->grad[i] += g * (std::log(real(1) - p) - std::log(p));
            }
        }
    });
}

Tensor l2_normalize(const Tensor& a, int axis, real eps) {
    check_defined(a, "l2_normalize");
    const SliceView view = slices_along(a, axis, "l2_normalize");
    const auto av = a.data();
    std::vector<real> out(a.numel());
    std::vector<real> denoms(view.count);
    for (size_t s = 0; s < view.count; ++s) {
        const size_t base = s * view.step;
        real sq = 0;
        for (size_t i = 0; i < view.length; ++i) {
            const real x = av[base + i * view.stride];
            sq += x * x;
        }
        const real norm = std::sqrt(sq);
        const real d = std::max(norm, eps);
        denoms[s] = norm > eps ? d : -d;  // sign marks the clamped case
        for (size_t i = 0; i < view.length; ++i) out[base + i * view.stride] = av[base + i * view.stride] / d;
    }
    auto an = a.node_ptr();
    return make_op(a.shape(), std::move(out), {a}, [an, view, denoms](TensorNode& self) {
        an->ensure_grad();
        for (size_t s = 0; s < view.count; ++s) {
            const size_t base = s * view.step;
            const real d = std::abs(denoms[s]);
            if (denoms[s] < 0) {  // norm below eps: divisor is constant
                for (size_t i = 0; i < view.length; ++i) {
                    const size_t k = base + i * view.stride;
                    an->grad[k] += self.grad[k] / d;
                }
                continue;
            }
            real dot = 0;
            for (size_t i = 0; i < view.length; ++i) {
                const size_t k = base + i * view.stride;
                dot += self.grad[k] * self.value[k];
            }
            for (size_t i = 0; i < view.length; ++i) {
                const size_t k = base + i * view.stride;
                an->grad[k] += (self.grad[k] - self.value[k] * dot) / d;
            }
        }
    });
}

namespace {

// Output index range [lo, hi) whose input index k_off + i*stride stays
// inside [0, extent); hoists the boundary checks out of the inner loops.
struct ConvSpan {
    int lo, hi;
};

inline ConvSpan conv_span(int k, int pad, int stride, int extent, int out_extent) {
    const int shift = pad - k;
    int lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
    const int top = extent - 1 - k + pad;
    int hi = top < 0 ? 0 : top / stride + 1;
    if (hi > out_extent) hi = out_extent;
    if (lo > hi) lo = hi;
    return {lo, hi};
}

// The specialized 3x3 and 1x1 kernels below walk each accumulator in the same
// tap order as the generic span loops, adding one rounded product at a time,
// so both code paths produce bit-identical results.

// One output row of a 3x3 stride-1 pad-1 correlation. r0/r2 may be null at
// the image border.
inline void conv3_row(real* o, const real* r0, const real* r1, const real* r2, const real* k9, int w) {
    {
        real a = o[0];
        if (r0) { a += k9[1] * r0[0]; a += k9[2] * r0[1]; }
        a += k9[4] * r1[0];
        a += k9[5] * r1[1];
        if (r2) { a += k9[7] * r2[0]; a += k9[8] * r2[1]; }
        o[0] = a;
    }
    if (r0 && r2) {
        for (int j = 1; j < w - 1; ++j) {
            real a = o[j];
            a += k9[0] * r0[j - 1];
            a += k9[1] * r0[j];
            a += k9[2] * r0[j + 1];
            a += k9[3] * r1[j - 1];
            a += k9[4] * r1[j];
            a += k9[5] * r1[j + 1];
            a += k9[6] * r2[j - 1];
            a += k9[7] * r2[j];
            a += k9[8] * r2[j + 1];
            o[j] = a;
        }
    } else {
        const real* re = r0 ? r0 : r2;
        const real* ke = r0 ? k9 : k9 + 6;
        for (int j = 1; j < w - 1; ++j) {
            real a = o[j];
            if (r0) {
                a += ke[0] * re[j - 1];
                a += ke[1] * re[j];
                a += ke[2] * re[j + 1];
            }
            a += k9[3] * r1[j - 1];
            a += k9[4] * r1[j];
            a += k9[5] * r1[j + 1];
            if (r2) {
                a += ke[0] * re[j - 1];
                a += ke[1] * re[j];
                a += ke[2] * re[j + 1];
            }
            o[j] = a;
        }
    }
    {
        const int j = w - 1;
        real a = o[j];
        if (r0) { a += k9[0] * r0[j - 1]; a += k9[1] * r0[j]; }
        a += k9[3] * r1[j - 1];
        a += k9[4] * r1[j];
        if (r2) { a += k9[6] * r2[j - 1]; a += k9[7] * r2[j]; }
        o[j] = a;
    }
}

inline void conv3_plane(real* oplane, const real* xplane, const real* k9, int h, int w) {
    for (int oy = 0; oy < h; ++oy) {
        const real* r0 = oy > 0 ? xplane + static_cast<size_t>(oy - 1) * w : nullptr;
        const real* r1 = xplane + static_cast<size_t>(oy) * w;
        const real* r2 = oy + 1 < h ? xplane + static_cast<size_t>(oy + 1) * w : nullptr;
        conv3_row(oplane + static_cast<size_t>(oy) * w, r0, r1, r2, k9, w);
    }
}

// Input gradient of the same correlation: a 3x3 gather over the output
// gradient with the kernel taps transposed (dx[iy][j] sums k[ky][kx] times
// g[iy+1-ky][j+1-kx]).
inline void conv3_plane_dx(real* dxplane, const real* gplane, const real* k9, int h, int w) {
    for (int iy = 0; iy < h; ++iy) {
        const real* g0 = iy + 1 < h ? gplane + static_cast<size_t>(iy + 1) * w : nullptr;
        const real* g1 = gplane + static_cast<size_t>(iy) * w;
        const real* g2 = iy > 0 ? gplane + static_cast<size_t>(iy - 1) * w : nullptr;
        real* drow = dxplane + static_cast<size_t>(iy) * w;
        {
            real a = drow[0];
            if (g0) { a += k9[0] * g0[1]; a += k9[1] * g0[0]; }
            a += k9[3] * g1[1];
            a += k9[4] * g1[0];
            if (g2) { a += k9[6] * g2[1]; a += k9[7] * g2[0]; }
            drow[0] = a;
        }
        for (int j = 1; j < w - 1; ++j) {
            real a = drow[j];
            if (g0) {
                a += k9[0] * g0[j + 1];
                a += k9[1] * g0[j];
                a += k9[2] * g0[j - 1];
            }
            a += k9[3] * g1[j + 1];
            a += k9[4] * g1[j];
            a += k9[5] * g1[j - 1];
            if (g2) {
                a += k9[6] * g2[j + 1];
                a += k9[7] * g2[j];
                a += k9[8] * g2[j - 1];
            }
            drow[j] = a;
        }
        {
            const int j = w - 1;
            real a = drow[j];
            if (g0) { a += k9[1] * g0[j]; a += k9[2] * g0[j - 1]; }
            a += k9[4] * g1[j];
            a += k9[5] * g1[j - 1];
            if (g2) { a += k9[7] * g2[j]; a += k9[8] * g2[j - 1]; }
            drow[j] = a;
        }
    }
}

// Kernel gradient: one sweep over the output gradient plane accumulating all
// nine taps, each in the same (oy, j) order the generic loop uses per tap.
inline void conv3_plane_dk(real* dk9, const real* gplane, const real* xplane, int h, int w) {
    real acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
    for (int oy = 0; oy < h; ++oy) {
        const real* x0 = oy > 0 ? xplane + static_cast<size_t>(oy - 1) * w : nullptr;
        const real* x1 = xplane + static_cast<size_t>(oy) * w;
        const real* x2 = oy + 1 < h ? xplane + static_cast<size_t>(oy + 1) * w : nullptr;
        const real* grow = gplane + static_cast<size_t>(oy) * w;
        {
            const real g = grow[0];
            if (x0) { acc[1] += g * x0[0]; acc[2] += g * x0[1]; }
            acc[4] += g * x1[0];
            acc[5] += g * x1[1];
            if (x2) { acc[7] += g * x2[0]; acc[8] += g * x2[1]; }
        }
        if (x0 && x2) {
            for (int j = 1; j < w - 1; ++j) {
                const real g = grow[j];
                acc[0] += g * x0[j - 1];
                acc[1] += g * x0[j];
                acc[2] += g * x0[j + 1];
                acc[3] += g * x1[j - 1];
                acc[4] += g * x1[j];
                acc[5] += g * x1[j + 1];
                acc[6] += g * x2[j - 1];
                acc[7] += g * x2[j];
                acc[8] += g * x2[j + 1];
            }
        } else {
            for (int j = 1; j < w - 1; ++j) {
                const real g = grow[j];
                if (x0) {
                    acc[0] += g * x0[j - 1];
                    acc[1] += g * x0[j];
                    acc[2] += g * x0[j + 1];
                }
                acc[3] += g * x1[j - 1];
                acc[4] += g * x1[j];
                acc[5] += g * x1[j + 1];
                if (x2) {
                    acc[6] += g * x2[j - 1];
                    acc[7] += g * x2[j];
                    acc[8] += g * x2[j + 1];
                }
            }
        }
        {
            const int j = w - 1;
            const real g = grow[j];
            if (x0) { acc[0] += g * x0[j - 1]; acc[1] += g * x0[j]; }
            acc[3] += g * x1[j - 1];
            acc[4] += g * x1[j];
            if (x2) { acc[6] += g * x2[j - 1]; acc[7] += g * x2[j]; }
        }
    }
    for (int t = 0; t < 9; ++t) dk9[t] += acc[t];
}

// 3x3 stride-2 pad-1 forward gather; only the first row and column lose taps
// when the input extent is even.
inline void conv3s2_plane(real* oplane, const real* xplane, const real* k9, int h, int w, int ho, int wo) {
    for (int oy = 0; oy < ho; ++oy) {
        const int iy = 2 * oy - 1;
        const real* r0 = iy >= 0 ? xplane + static_cast<size_t>(iy) * w : nullptr;
        const real* r1 = iy + 1 < h ? xplane + static_cast<size_t>(iy + 1) * w : nullptr;
        const real* r2 = iy + 2 < h ? xplane + static_cast<size_t>(iy + 2) * w : nullptr;
        real* orow = oplane + static_cast<size_t>(oy) * wo;
        for (int j = 0; j < wo; ++j) {
            const int ix = 2 * j - 1;
            real a = orow[j];
            if (r0) {
                if (ix >= 0) a += k9[0] * r0[ix];
                if (ix + 1 < w) a += k9[1] * r0[ix + 1];
                if (ix + 2 < w) a += k9[2] * r0[ix + 2];
            }
            if (r1) {
                if (ix >= 0) a += k9[3] * r1[ix];
                if (ix + 1 < w) a += k9[4] * r1[ix + 1];
                if (ix + 2 < w) a += k9[5] * r1[ix + 2];
            }
            if (r2) {
                if (ix >= 0) a += k9[6] * r2[ix];
                if (ix + 1 < w) a += k9[7] * r2[ix + 1];
                if (ix + 2 < w) a += k9[8] * r2[ix + 2];
            }
            orow[j] = a;
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    check_defined(x, "conv2d");
    check_defined(kernel, "conv2d");
    if (x.rank() != 3) throw DimError("conv2d: input must be (C,H,W), got " + shape_str(x.shape()));
    if (kernel.rank() != 4)
        throw DimError("conv2d: kernel must be (O,C,kh,kw), got " + shape_str(kernel.shape()));
    if (stride < 1) throw DimError("conv2d: stride must be >= 1");
    if (pad < 0) throw DimError("conv2d: pad must be >= 0");
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != ci)
        throw DimError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input has " +
                       std::to_string(ci));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co))
        throw DimError("conv2d: bias shape " + shape_str(bias.shape()) + ", expected (" + std::to_string(co) + ")");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw DimError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                       shape_str(x.shape()));

    const bool fast3 = kh == 3 && kw == 3 && pad == 1 && w >= 2 && h >= 1;
    const bool fast3s1 = fast3 && stride == 1;
    const bool fast3s2 = fast3 && stride == 2;
    const bool fast1 = kh == 1 && kw == 1 && pad == 0 && stride == 1;

    const auto xv = x.data();
    const auto kv = kernel.data();
    std::vector<real> out(static_cast<size_t>(co) * ho * wo, real(0));
    parallel_for(co, [&](int oc) {
        real* oplane = &out[static_cast<size_t>(oc) * ho * wo];
        const real b = bias.defined() ? bias.data()[oc] : real(0);
        for (int i = 0; i < ho * wo; ++i) oplane[i] = b;
        for (int ic = 0; ic < ci; ++ic) {
            const real* xplane = &xv[static_cast<size_t>(ic) * h * w];
            const real* kplane = &kv[(static_cast<size_t>(oc) * ci + ic) * kh * kw];
            if (fast3s1) {
                conv3_plane(oplane, xplane, kplane, h, w);
                continue;
            }
            if (fast3s2) {
                conv3s2_plane(oplane, xplane, kplane, h, w, ho, wo);
                continue;
            }
            if (fast1) {
                const real wgt = kplane[0];
                for (int i = 0; i < ho * wo; ++i) oplane[i] += wgt * xplane[i];
                continue;
            }
            for (int ky = 0; ky < kh; ++ky) {
                const ConvSpan ry = conv_span(ky, pad, stride, h, ho);
                for (int kx = 0; kx < kw; ++kx) {
                    const ConvSpan rx = conv_span(kx, pad, stride, w, wo);
                    const real wgt = kplane[static_cast<size_t>(ky) * kw + kx];
                    const int n = rx.hi - rx.lo;
                    for (int oy = ry.lo; oy < ry.hi; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        const real* xrow = &xplane[static_cast<size_t>(iy) * w + rx.lo * stride + kx - pad];
                        real* orow = &oplane[static_cast<size_t>(oy) * wo + rx.lo];
                        if (stride == 1) {
                            for (int j = 0; j < n; ++j) orow[j] += wgt * xrow[j];
                        } else {
                            for (int j = 0; j < n; ++j) orow[j] += wgt * xrow[static_cast<size_t>(j) * stride];
                        }
                    }
                }
            }
        }
    });

    auto xn = x.node_ptr();
    auto kn = kernel.node_ptr();
    auto bn = bias.defined() ? bias.node_ptr() : nullptr;
    std::vector<Tensor> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return make_op({co, ho, wo}, std::move(out), inputs,
                   [xn, kn, bn, ci, h, w, co, kh, kw, ho, wo, stride, pad, fast3s1, fast1](TensorNode& self) {
                       const auto& g = self.grad;
                       if (xn->requires_grad) {
                           xn->ensure_grad();
                           parallel_for(ci, [&](int ic) {
                               real* dxplane = &xn->grad[static_cast<size_t>(ic) * h * w];
                               for (int oc = 0; oc < co; ++oc) {
                                   const real* gplane = &g[static_cast<size_t>(oc) * ho * wo];
                                   const real* kplane =
                                       &kn->value[(static_cast<size_t>(oc) * ci + ic) * kh * kw];
                                   if (fast3s1) {
                                       conv3_plane_dx(dxplane, gplane, kplane, h, w);
                                       continue;
                                   }
                                   if (fast1) {
                                       const real wgt = kplane[0];
                                       for (int i = 0; i < h * w; ++i) dxplane[i] += wgt * gplane[i];
                                       continue;
                                   }
                                   for (int ky = 0; ky < kh; ++ky) {
                                       const ConvSpan ry = conv_span(ky, pad, stride, h, ho);
                                       for (int kx = 0; kx < kw; ++kx) {
                                           const ConvSpan rx = conv_span(kx, pad, stride, w, wo);
                                           const real wgt = kplane[static_cast<size_t>(ky) * kw + kx];
                                           const int n = rx.hi - rx.lo;
                                           for (int oy = ry.lo; oy < ry.hi; ++oy) {
                                               const int iy = oy * stride + ky - pad;
                                               real* dxrow =
                                                   &dxplane[static_cast<size_t>(iy) * w + rx.lo * stride + kx - pad];
                                               const real* grow = &gplane[static_cast<size_t>(oy) * wo + rx.lo];
                                               if (stride == 1) {
                                                   for (int j = 0; j < n; ++j) dxrow[j] += wgt * grow[j];
                                               } else {
                                                   for (int j = 0; j < n; ++j)
                                                       dxrow[static_cast<size_t>(j) * stride] += wgt * grow[j];
                                               }
                                           }
                                       }
                                   }
                               }
                           });
                       }
                       if (kn->requires_grad) {
                           kn->ensure_grad();
                           parallel_for(co, [&](int oc) {
                               const real* gplane = &g[static_cast<size_t>(oc) * ho * wo];
                               for (int ic = 0; ic < ci; ++ic) {
                                   const real* xplane = &xn->value[static_cast<size_t>(ic) * h * w];
                                   real* dkplane = &kn->grad[(static_cast<size_t>(oc) * ci + ic) * kh * kw];
                                   if (fast3s1) {
                                       conv3_plane_dk(dkplane, gplane, xplane, h, w);
                                       continue;
                                   }
                                   if (fast1) {
                                       real acc = 0;
                                       for (int i = 0; i < h * w; ++i) acc += gplane[i] * xplane[i];
                                       dkplane[0] += acc;
                                       continue;
                                   }
                                   for (int ky = 0; ky < kh; ++ky) {
                                       const ConvSpan ry = conv_span(ky, pad, stride, h, ho);
                                       for (int kx = 0; kx < kw; ++kx) {
                                           const ConvSpan rx = conv_span(kx, pad, stride, w, wo);
                                           const int n = rx.hi - rx.lo;
                                           real acc = 0;
                                           for (int oy = ry.lo; oy < ry.hi; ++oy) {
                                               const int iy = oy * stride + ky - pad;
                                               const real* grow = &gplane[static_cast<size_t>(oy) * wo + rx.lo];
                                               const real* xrow =
                                                   &xplane[static_cast<size_t>(iy) * w + rx.lo * stride + kx - pad];
                                               if (stride == 1) {
                                                   for (int j = 0; j < n; ++j) acc += grow[j] * xrow[j];
                                               } else {
                                                   for (int j = 0; j < n; ++j)
                                                       acc += grow[j] * xrow[static_cast<size_t>(j) * stride];
                                               }
                                           }
                                           dkplane[static_cast<size_t>(ky) * kw + kx] += acc;
                                       }
                                   }
                               }
                           });
                       }
                       if (bn && bn->requires_grad) {
                           bn->ensure_grad();
                           for (int oc = 0; oc < co; ++oc) {
                               real acc = 0;
                               const real* gplane = &g[static_cast<size_t>(oc) * ho * wo];
                               for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
                               bn->grad[oc] += acc;
                           }
                       }
                   });
}

Tensor upsample_nearest2x(const Tensor& x) {
    check_defined(x, "upsample_nearest2x");
    if (x.rank() != 3) throw DimError("upsample_nearest2x: input must be (C,H,W), got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int h2 = 2 * h, w2 = 2 * w;
    const auto xv = x.data();
    std::vector<real> out(static_cast<size_t>(c) * h2 * w2);
    for (int ic = 0; ic < c; ++ic) {
        const real* xplane = &xv[static_cast<size_t>(ic) * h * w];
        real* oplane = &out[static_cast<size_t>(ic) * h2 * w2];
        for (int y = 0; y < h2; ++y) {
            const real* xrow = &xplane[static_cast<size_t>(y / 2) * w];
            real* orow = &oplane[static_cast<size_t>(y) * w2];
            for (int xcol = 0; xcol < w2; ++xcol) orow[xcol] = xrow[xcol / 2];
        }
    }
    auto xn = x.node_ptr();
    return make_op({c, h2, w2}, std::move(out), {x}, [xn, c, h, w, h2, w2](TensorNode& self) {
        xn->ensure_grad();
        for (int ic = 0; ic < c; ++ic) {
            real* dxplane = &xn->grad[static_cast<size_t>(ic) * h * w];
            const real* gplane = &self.grad[static_cast<size_t>(ic) * h2 * w2];
            for (int y = 0; y < h2; ++y)
                for (int xcol = 0; xcol < w2; ++xcol)
                    dxplane[static_cast<size_t>(y / 2) * w + xcol / 2] +=
                        gplane[static_cast<size_t>(y) * w2 + xcol];
        }
    });
}

Tensor embedding_row(const Tensor& table, int index) {
    check_defined(table, "embedding_row");
    if (table.rank() != 2) throw DimError("embedding_row: table must be (V,E), got " + shape_str(table.shape()));
    const int v = table.dim(0), e = table.dim(1);
    if (index < 0 || index >= v)
        throw DimError("embedding_row: index " + std::to_string(index) + " out of range for " +
                       std::to_string(v) + " rows");
    const auto tv = table.data();
    std::vector<real> out(tv.begin() + static_cast<size_t>(index) * e,
                          tv.begin() + static_cast<size_t>(index + 1) * e);
    auto tn = table.node_ptr();
    return make_op({e}, std::move(out), {table}, [tn, index, e](TensorNode& self) {
        tn->ensure_grad();
        for (int i = 0; i < e; ++i) tn->grad[static_cast<size_t>(index) * e + i] += self.grad[i];
    });
}

Tensor tile_spatial(const Tensor& v, int h, int w) {
    check_defined(v, "tile_spatial");
    if (v.rank() != 1) throw DimError("tile_spatial: expected rank-1, got " + shape_str(v.shape()));
    if (h <= 0 || w <= 0) throw DimError("tile_spatial: target extents must be positive");
    const int c = v.dim(0);
    const auto vv = v.data();
    std::vector<real> out(static_cast<size_t>(c) * h * w);
    for (int ic = 0; ic < c; ++ic)
        std::fill_n(&out[static_cast<size_t>(ic) * h * w], static_cast<size_t>(h) * w, vv[ic]);
    auto vn = v.node_ptr();
    return make_op({c, h, w}, std::move(out), {v}, [vn, c, h, w](TensorNode& self) {
        vn->ensure_grad();
        for (int ic = 0; ic < c; ++ic) {
            real acc = 0;
            const real* gplane = &self.grad[static_cast<size_t>(ic) * h * w];
            for (int i = 0; i < h * w; ++i) acc += gplane[i];
            vn->grad[ic] += acc;
        }
    });
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw StateError("backward: undefined tensor");
    if (loss.numel() != 1)
        throw StateError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    TensorNode* root = loss.node();
    if (!root->requires_grad)
        throw StateError("backward: loss does not depend on any tensor requiring gradients");

    // Iterative postorder DFS; reversed, consumers precede producers.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* node : order) {
        if (!node->is_leaf() && node->consumed)
            throw StateError("backward: graph already consumed by a previous backward");
    }
    for (TensorNode* node : order) {
        if (node->is_leaf()) {
            node->ensure_grad();  // leaf gradients accumulate across sweeps
        } else {
            node->grad.assign(node->numel(), real(0));
        }
    }

    root->grad[0] += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
        if (!node->is_leaf()) node->consumed = true;
    }
}

}  // namespace mtx
