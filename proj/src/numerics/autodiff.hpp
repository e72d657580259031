// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "numerics/tensor.hpp"

namespace sane::num {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::function<void()> backward;

    Tensor<T>& grad_buffer() {
        if (grad.size() != value.size() || grad.shape() != value.shape()) {
            grad = Tensor<T>(value.shape());
        }
        return grad;
    }
    bool has_grad() const { return grad.size() == value.size() && !grad.shape().empty(); }
    void zero_grad() {
        if (has_grad()) {
            grad.fill(T{0});
        }
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return n;
}

/// Contiguous row range that forms one independent sequence inside a packed batch.
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
};

struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
};

enum class Unary { Relu, Gelu };

/// Reverse-mode tape. Every op evaluates eagerly; when recording is on and an
/// input requires a gradient, the op's backward closure is appended in
/// creation order so `backward` can replay it in reverse.
template <typename T>
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// c = op(a) @ op(b), where op transposes when requested. 2-D only.
    Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
    /// x·Wᵀ + bias, with W stored as [out x in] and bias [1 x out] (bias may be null).
    Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

    Var<T> add(const Var<T>& a, const Var<T>& b);
    Var<T> sub(const Var<T>& a, const Var<T>& b);
    Var<T> mul(const Var<T>& a, const Var<T>& b);
    Var<T> scale(const Var<T>& a, T s);
    Var<T> relu(const Var<T>& a) { return unary(a, Unary::Relu); }
    Var<T> gelu(const Var<T>& a) { return unary(a, Unary::Gelu); }
    Var<T> unary(const Var<T>& a, Unary op);

    Var<T> softmax(const Var<T>& x, int axis);
    Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

    Var<T> transpose(const Var<T>& a);
    Var<T> concat_rows(const std::vector<Var<T>>& parts);
    Var<T> gather_rows(const Var<T>& table, const std::vector<std::int64_t>& index);
    Var<T> sum(const Var<T>& a);
    Var<T> mean(const Var<T>& a);

    /// Multi-head scaled dot-product self-attention; each segment attends only within itself.
    Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                     const std::vector<Segment>& segments);
    /// One row per segment: the mean of that segment's rows.
    Var<T> segment_mean(const Var<T>& x, const std::vector<Segment>& segments);
    Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12));

    /// sum(mask*(pred-target)^2)/sum(mask); zero when the mask is empty.
    Var<T> mse_masked(const Var<T>& pred, const Var<T>& target, const Var<T>& mask);
    /// Mean softmax cross-entropy over rows; exclude_diagonal drops logit (i,i) from row i.
    Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::int64_t>& labels,
                         bool exclude_diagonal = false);

    /// Input rows are flattened (C,H,W) images; output rows are flattened (Cout,Ho,Wo).
    Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                  const ConvGeometry& geom);
    /// Non-affine batch norm with batch statistics. Rows are samples, columns are
    /// (channels, spatial). Batch mean and unbiased variance are written out when requested.
    Var<T> batch_norm_train(const Var<T>& x, std::size_t channels, T eps,
                            std::vector<T>* batch_mean = nullptr,
                            std::vector<T>* batch_var = nullptr);
    /// Non-affine batch norm with fixed running statistics.
    Var<T> batch_norm_eval(const Var<T>& x, std::size_t channels, const std::vector<T>& mean,
                           const std::vector<T>& var, T eps);

    void backward(const Var<T>& loss);
    void clear() { nodes_.clear(); }

private:
    Var<T> make(Tensor<T> value, std::initializer_list<const Var<T>*> inputs);
    void record(const Var<T>& out, std::function<void()> fn);

    bool record_;
    std::vector<Var<T>> nodes_;
};

/// Scalar value of a single-element variable.
template <typename T>
T item(const Var<T>& v) {
    require(v->value.size() == 1, ErrorKind::Dimension, "item() on non-scalar");
    return v->value[0];
}

template <typename T>
T gelu_scalar(T x);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sane::num
