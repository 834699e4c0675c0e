#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtx/rng.hpp"

namespace mtx {

#ifdef MTX_REAL_F32
using real = float;
#else
using real = double;
#endif

enum class DType : uint8_t { kF32 = 1, kF64 = 2 };

constexpr DType native_dtype() { return sizeof(real) == 4 ? DType::kF32 : DType::kF64; }

using Shape = std::vector<int>;

size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<real> value;
    std::vector<real> grad;  // sized on first accumulation
    bool requires_grad = false;
    bool consumed = false;
    uint64_t grad_epoch = 0;  // non-leaf grads reset when a new sweep first touches them
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return parents.empty(); }
    size_t numel() const { return value.size(); }
    void accumulate(size_t i, real g);
    void ensure_grad();
};

// Reverse-mode autodiff tensor. Copies share the underlying node; ops record
// the graph only while some input requires gradients, so pure-value pipelines
// carry no tape overhead.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, real v);
    static Tensor from(const Shape& shape, std::vector<real> data);
    static Tensor scalar(real v);
    static Tensor randn(const Shape& shape, Rng& rng, real stddev = 1.0);
    static Tensor uniform(const Shape& shape, Rng& rng, real lo, real hi);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int dim(int axis) const;
    size_t numel() const;

    std::span<const real> data() const;
    // Leaf-only mutable access (parameter init, optimizer updates, tests).
    std::span<real> mutable_data();

    real item() const;
    real at(std::initializer_list<int> idx) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const real> grad() const;
    void zero_grad();

    // Value copy with no graph attachment.
    Tensor detach() const;

    TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<TensorNode> node);

  private:
    std::shared_ptr<TensorNode> node_;
};

// Elementwise; shapes must match exactly, except that a rank-0 operand
// broadcasts against any shape (the only implicit broadcast in the library).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, real s);
Tensor mul_scalar(const Tensor& a, real s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, real s) { return add_scalar(a, s); }
inline Tensor operator+(real s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, real s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, real s) { return mul_scalar(a, s); }
inline Tensor operator*(real s, const Tensor& a) { return mul_scalar(a, s); }

// matmul accepts (M,K)x(K,N) -> (M,N) and (M,K)x(K) -> (M).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Rank-1 tensors of equal length n become the columns of an (n, k) matrix.
Tensor stack_cols(const std::vector<Tensor>& cols);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, real slope);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis);  // rank-2 only
Tensor mean(const Tensor& a);

// Max-subtracted, numerically stable for entries up to +-1e4 and beyond.
Tensor softmax(const Tensor& a, int axis = 0);

// Mean binary cross-entropy; predictions are clamped to [eps, 1-eps],
// eps = 1e-7, before the logs.
Tensor bce(const Tensor& pred, const Tensor& target);

// Scales slices along `axis` to unit L2 norm; slices with norm < eps are
// divided by eps instead.
Tensor l2_normalize(const Tensor& a, int axis = 0, real eps = 1e-12);

// x: (C,H,W); kernel: (O,C,kh,kw); bias: (O) or an undefined tensor for none.
// Stride and padding are always explicit.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);

// Row `index` of a (V,E) table as a rank-1 tensor; gradients accumulate
// into that row.
Tensor embedding_row(const Tensor& table, int index);

// Rank-1 (C) -> (C,H,W) with the value repeated at every spatial site.
Tensor tile_spatial(const Tensor& v, int h, int w);

// Reverse sweep from a scalar. Each reachable node is visited exactly once;
// the swept graph is consumed and a second backward through any part of it
// raises StateError. Leaf gradients accumulate additively across sweeps.
void backward(const Tensor& loss);

}  // namespace mtx
