// SPDX-License-Identifier: Apache-2.0

#include "numerics/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace sane::num {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMapRM<T> as_matrix(const Tensor<T>& t) {
    return CMapRM<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MapRM<T> as_matrix(Tensor<T>& t) {
    return MapRM<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
}

void check(bool cond, const std::string& what) {
    if (!cond) {
        fail(ErrorKind::Dimension, what);
    }
}

bool wants_grad(const Var<double>& v) { return v && v->requires_grad; }
bool wants_grad(const Var<float>& v) { return v && v->requires_grad; }

// Row-broadcast compatibility: identical shapes, or one side has a single row.
template <typename T>
Shape broadcast_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) {
        return a.shape();
    }
    if (a.cols() == b.cols()) {
        if (b.rows() == 1) {
            return a.shape();
        }
        if (a.rows() == 1) {
            return b.shape();
        }
    }
    fail(ErrorKind::Dimension, fmt::format("{}: incompatible shapes {} and {}", op,
                                           shape_str(a.shape()), shape_str(b.shape())));
}

// Reduce a gradient of the broadcast output shape back onto an operand.
template <typename T>
void accumulate_broadcast(Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.size() == src.size()) {
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] += src[i];
        }
        return;
    }
    const std::size_t cols = dst.cols();
    for (std::size_t r = 0; r < src.rows(); ++r) {
        const T* s = src.row(r);
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] += s[c];
        }
    }
}

template <typename T>
T operand_at(const Tensor<T>& t, std::size_t r, std::size_t c, std::size_t cols) {
    return t.rows() == 1 ? t[c] : t[r * cols + c];
}

}  // namespace

template <typename T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
static T gelu_grad_scalar(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
    return cdf + x * pdf;
}

template <typename T>
Var<T> Tape<T>::make(Tensor<T> value, std::initializer_list<const Var<T>*> inputs) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (record_) {
        for (const Var<T>* in : inputs) {
            if (in && *in && (*in)->requires_grad) {
                n->requires_grad = true;
                break;
            }
        }
    }
    return n;
}

template <typename T>
void Tape<T>::record(const Var<T>& out, std::function<void()> fn) {
    if (out->requires_grad) {
        out->backward = std::move(fn);
        nodes_.push_back(out);
    }
}

template <typename T>
Var<T> Tape<T>::matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
    const std::size_t m = trans_a ? a->value.cols() : a->value.rows();
    const std::size_t ka = trans_a ? a->value.rows() : a->value.cols();
    const std::size_t kb = trans_b ? b->value.cols() : b->value.rows();
    const std::size_t n = trans_b ? b->value.rows() : b->value.cols();
    check(ka == kb, fmt::format("matmul: inner extents differ ({} vs {})", ka, kb));

    Tensor<T> out(m, n);
    {
        auto A = as_matrix(a->value);
        auto B = as_matrix(b->value);
        auto C = as_matrix(out);
        if (!trans_a && !trans_b) {
            C.noalias() = A * B;
        } else if (!trans_a && trans_b) {
            C.noalias() = A * B.transpose();
        } else if (trans_a && !trans_b) {
            C.noalias() = A.transpose() * B;
        } else {
            C.noalias() = A.transpose() * B.transpose();
        }
    }
    auto c = make(std::move(out), {&a, &b});
    Node<T>* cp = c.get();
    record(c, [a, b, cp, trans_a, trans_b]() {
        auto dC = as_matrix(static_cast<const Tensor<T>&>(cp->grad));
        auto A = as_matrix(static_cast<const Tensor<T>&>(a->value));
        auto B = as_matrix(static_cast<const Tensor<T>&>(b->value));
        if (wants_grad(a)) {
            auto dA = as_matrix(a->grad_buffer());
            if (!trans_a && !trans_b) {
                dA.noalias() += dC * B.transpose();
            } else if (!trans_a && trans_b) {
                dA.noalias() += dC * B;
            } else if (trans_a && !trans_b) {
                dA.noalias() += B * dC.transpose();
            } else {
                dA.noalias() += B.transpose() * dC.transpose();
            }
        }
        if (wants_grad(b)) {
            auto dB = as_matrix(b->grad_buffer());
            if (!trans_a && !trans_b) {
                dB.noalias() += A.transpose() * dC;
            } else if (!trans_a && trans_b) {
                dB.noalias() += dC.transpose() * A;
            } else if (trans_a && !trans_b) {
                dB.noalias() += A * dC;
            } else {
                dB.noalias() += dC.transpose() * A.transpose();
            }
        }
    });
    return c;
}

template <typename T>
Var<T> Tape<T>::linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const std::size_t rows = x->value.rows();
    const std::size_t in = x->value.cols();
    const std::size_t out_dim = weight->value.rows();
    check(weight->value.cols() == in,
          fmt::format("linear: input width {} does not match weight {}", in,
                      shape_str(weight->value.shape())));
    if (bias) {
        check(bias->value.size() == out_dim, "linear: bias length does not match output width");
    }
    Tensor<T> out(rows, out_dim);
    {
        auto X = as_matrix(x->value);
        auto W = as_matrix(weight->value);
        auto Y = as_matrix(out);
        Y.noalias() = X * W.transpose();
        if (bias) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->value.data(),
                                                                     out_dim);
            Y.rowwise() += bv;
        }
    }
    auto y = make(std::move(out), {&x, &weight, &bias});
    Node<T>* yp = y.get();
    record(y, [x, weight, bias, yp]() {
        auto dY = as_matrix(static_cast<const Tensor<T>&>(yp->grad));
        if (wants_grad(x)) {
            as_matrix(x->grad_buffer()).noalias() +=
                dY * as_matrix(static_cast<const Tensor<T>&>(weight->value));
        }
        if (wants_grad(weight)) {
            as_matrix(weight->grad_buffer()).noalias() +=
                dY.transpose() * as_matrix(static_cast<const Tensor<T>&>(x->value));
        }
        if (wants_grad(bias)) {
            Tensor<T>& db = bias->grad_buffer();
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(db.data(), db.size());
            bv += dY.colwise().sum();
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::add(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out(broadcast_shape(a->value, b->value, "add"));
    const std::size_t cols = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = operand_at(a->value, r, c, cols) + operand_at(b->value, r, c, cols);
        }
    }
    auto y = make(std::move(out), {&a, &b});
    Node<T>* yp = y.get();
    record(y, [a, b, yp]() {
        if (wants_grad(a)) {
            accumulate_broadcast(a->grad_buffer(), yp->grad);
        }
        if (wants_grad(b)) {
            accumulate_broadcast(b->grad_buffer(), yp->grad);
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::sub(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out(broadcast_shape(a->value, b->value, "sub"));
    const std::size_t cols = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = operand_at(a->value, r, c, cols) - operand_at(b->value, r, c, cols);
        }
    }
    auto y = make(std::move(out), {&a, &b});
    Node<T>* yp = y.get();
    record(y, [a, b, yp]() {
        if (wants_grad(a)) {
            accumulate_broadcast(a->grad_buffer(), yp->grad);
        }
        if (wants_grad(b)) {
            Tensor<T> neg = yp->grad;
            for (auto& v : neg.storage()) {
                v = -v;
            }
            accumulate_broadcast(b->grad_buffer(), neg);
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::mul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out(broadcast_shape(a->value, b->value, "mul"));
    const std::size_t cols = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = operand_at(a->value, r, c, cols) * operand_at(b->value, r, c, cols);
        }
    }
    auto y = make(std::move(out), {&a, &b});
    Node<T>* yp = y.get();
    record(y, [a, b, yp]() {
        const Tensor<T>& g = yp->grad;
        const std::size_t cols = g.cols();
        if (wants_grad(a)) {
            Tensor<T> ga(g.shape());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    ga[r * cols + c] = g[r * cols + c] * operand_at(b->value, r, c, cols);
                }
            }
            accumulate_broadcast(a->grad_buffer(), ga);
        }
        if (wants_grad(b)) {
            Tensor<T> gb(g.shape());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    gb[r * cols + c] = g[r * cols + c] * operand_at(a->value, r, c, cols);
                }
            }
            accumulate_broadcast(b->grad_buffer(), gb);
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::scale(const Var<T>& a, T s) {
    Tensor<T> out = a->value;
    for (auto& v : out.storage()) {
        v *= s;
    }
    auto y = make(std::move(out), {&a});
    Node<T>* yp = y.get();
    record(y, [a, yp, s]() {
        Tensor<T>& ga = a->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += yp->grad[i] * s;
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::unary(const Var<T>& a, Unary op) {
    Tensor<T> out = a->value;
    for (auto& v : out.storage()) {
        v = op == Unary::Relu ? (v > T(0) ? v : T(0)) : gelu_scalar(v);
    }
    auto y = make(std::move(out), {&a});
    Node<T>* yp = y.get();
    record(y, [a, yp, op]() {
        Tensor<T>& ga = a->grad_buffer();
        const Tensor<T>& x = a->value;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const T d = op == Unary::Relu ? (x[i] > T(0) ? T(1) : T(0)) : gelu_grad_scalar(x[i]);
            ga[i] += yp->grad[i] * d;
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::softmax(const Var<T>& x, int axis) {
    check(axis == 0 || axis == 1 || axis == -1, "softmax: axis must be 0 or 1");
    const bool along_rows = axis != 0;  // normalize each row
    const std::size_t rows = x->value.rows();
    const std::size_t cols = x->value.cols();
    const std::size_t outer = along_rows ? rows : cols;
    const std::size_t inner = along_rows ? cols : rows;
    const std::size_t stride = along_rows ? 1 : cols;
    auto index = [along_rows, cols, stride](std::size_t o, std::size_t i) {
        return along_rows ? o * cols + i * stride : i * stride + o;
    };
    Tensor<T> out(x->value.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < inner; ++i) {
            mx = std::max(mx, x->value[index(o, i)]);
        }
        T total = 0;
        for (std::size_t i = 0; i < inner; ++i) {
            const T e = std::exp(x->value[index(o, i)] - mx);
            out[index(o, i)] = e;
            total += e;
        }
        for (std::size_t i = 0; i < inner; ++i) {
            out[index(o, i)] /= total;
        }
    }
    auto y = make(std::move(out), {&x});
    Node<T>* yp = y.get();
    record(y, [x, yp, outer, inner, index]() {
        Tensor<T>& gx = x->grad_buffer();
        const Tensor<T>& s = yp->value;
        const Tensor<T>& g = yp->grad;
        for (std::size_t o = 0; o < outer; ++o) {
            T dot = 0;
            for (std::size_t i = 0; i < inner; ++i) {
                dot += g[index(o, i)] * s[index(o, i)];
            }
            for (std::size_t i = 0; i < inner; ++i) {
                gx[index(o, i)] += s[index(o, i)] * (g[index(o, i)] - dot);
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    check(eps > T(0), "layer_norm: eps must be positive");
    const std::size_t rows = x->value.rows();
    const std::size_t cols = x->value.cols();
    if (gain) {
        check(gain->value.size() == cols, "layer_norm: gain width mismatch");
    }
    if (bias) {
        check(bias->value.size() == cols, "layer_norm: bias width mismatch");
    }
    Tensor<T> normed(x->value.shape());
    std::vector<T> inv_std(rows);
    Tensor<T> out(x->value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x->value.row(r);
        T mu = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            mu += xr[c];
        }
        mu /= T(cols);
        T var = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            var += (xr[c] - mu) * (xr[c] - mu);
        }
        var /= T(cols);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            const T n = (xr[c] - mu) * inv_std[r];
            normed[r * cols + c] = n;
            out[r * cols + c] = n * (gain ? gain->value[c] : T(1)) + (bias ? bias->value[c] : T(0));
        }
    }
    auto y = make(std::move(out), {&x, &gain, &bias});
    Node<T>* yp = y.get();
    record(y, [x, gain, bias, yp, normed = std::move(normed), inv_std = std::move(inv_std), rows,
               cols]() {
        const Tensor<T>& g = yp->grad;
        if (wants_grad(gain)) {
            Tensor<T>& gg = gain->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    gg[c] += g[r * cols + c] * normed[r * cols + c];
                }
            }
        }
        if (wants_grad(bias)) {
            Tensor<T>& gb = bias->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    gb[c] += g[r * cols + c];
                }
            }
        }
        if (wants_grad(x)) {
            Tensor<T>& gx = x->grad_buffer();
            std::vector<T> dn(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_dn = 0;
                T mean_dn_n = 0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dn[c] = g[r * cols + c] * (gain ? gain->value[c] : T(1));
                    mean_dn += dn[c];
                    mean_dn_n += dn[c] * normed[r * cols + c];
                }
                mean_dn /= T(cols);
                mean_dn_n /= T(cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    gx[r * cols + c] +=
                        inv_std[r] * (dn[c] - mean_dn - normed[r * cols + c] * mean_dn_n);
                }
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::transpose(const Var<T>& a) {
    const std::size_t rows = a->value.rows();
    const std::size_t cols = a->value.cols();
    Tensor<T> out(cols, rows);
    as_matrix(out) = as_matrix(a->value).transpose();
    auto y = make(std::move(out), {&a});
    Node<T>* yp = y.get();
    record(y, [a, yp]() {
        as_matrix(a->grad_buffer()) += as_matrix(static_cast<const Tensor<T>&>(yp->grad)).transpose();
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::concat_rows(const std::vector<Var<T>>& parts) {
    check(!parts.empty(), "concat_rows: no inputs");
    const std::size_t cols = parts.front()->value.cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        check(p->value.cols() == cols, "concat_rows: column counts differ");
        rows += p->value.rows();
    }
    Tensor<T> out(rows, cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.storage().begin(), p->value.storage().end(), out.data() + off);
        off += p->value.size();
    }
    auto y = std::make_shared<Node<T>>();
    y->value = std::move(out);
    if (record_) {
        y->requires_grad = std::any_of(parts.begin(), parts.end(),
                                       [](const Var<T>& p) { return p->requires_grad; });
    }
    Node<T>* yp = y.get();
    record(y, [parts, yp]() {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                Tensor<T>& gp = p->grad_buffer();
                for (std::size_t i = 0; i < gp.size(); ++i) {
                    gp[i] += yp->grad[off + i];
                }
            }
            off += p->value.size();
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::gather_rows(const Var<T>& table, const std::vector<std::int64_t>& index) {
    const std::size_t cols = table->value.cols();
    const auto vocab = static_cast<std::int64_t>(table->value.rows());
    Tensor<T> out(index.size(), cols);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= vocab) {
            fail(ErrorKind::Capacity,
                 fmt::format("gather_rows: index {} outside table of {} rows", index[i], vocab));
        }
        std::copy_n(table->value.row(static_cast<std::size_t>(index[i])), cols, out.row(i));
    }
    auto y = make(std::move(out), {&table});
    Node<T>* yp = y.get();
    record(y, [table, index, yp, cols]() {
        Tensor<T>& gt = table->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) {
            T* dst = gt.row(static_cast<std::size_t>(index[i]));
            const T* src = yp->grad.row(i);
            for (std::size_t c = 0; c < cols; ++c) {
                dst[c] += src[c];
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::sum(const Var<T>& a) {
    T total = 0;
    for (T v : a->value.storage()) {
        total += v;
    }
    auto y = make(Tensor<T>::scalar(total), {&a});
    Node<T>* yp = y.get();
    record(y, [a, yp]() {
        Tensor<T>& ga = a->grad_buffer();
        const T g = yp->grad[0];
        for (auto& v : ga.storage()) {
            v += g;
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::mean(const Var<T>& a) {
    check(a->value.size() > 0, "mean: empty tensor");
    return scale(sum(a), T(1) / T(a->value.size()));
}

template <typename T>
Var<T> Tape<T>::attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                          const std::vector<Segment>& segments) {
    check(q->value.same_shape(k->value) && q->value.same_shape(v->value),
          "attention: q, k, v shapes differ");
    const std::size_t rows = q->value.rows();
    const std::size_t dim = q->value.cols();
    check(heads > 0 && dim % heads == 0, "attention: width not divisible by head count");
    const std::size_t dh = dim / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    for (const auto& s : segments) {
        check(s.offset + s.length <= rows, "attention: segment outside input");
    }
    Tensor<T> out(q->value.shape());
    // probs[s * heads + h] holds the row-softmaxed attention matrix.
    std::vector<MatRM<T>> probs(segments.size() * heads);
    const auto D = static_cast<Eigen::Index>(dim);
    for (std::size_t si = 0; si < segments.size(); ++si) {
        const auto L = static_cast<Eigen::Index>(segments[si].length);
        if (L == 0) {
            continue;
        }
        const std::size_t base = segments[si].offset * dim;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = base + h * dh;
            CStridedMap<T> Q(q->value.data() + off, L, dh, Eigen::OuterStride<>(D));
            CStridedMap<T> K(k->value.data() + off, L, dh, Eigen::OuterStride<>(D));
            CStridedMap<T> V(v->value.data() + off, L, dh, Eigen::OuterStride<>(D));
            MatRM<T> S = (Q * K.transpose()) * sc;
            for (Eigen::Index r = 0; r < L; ++r) {
                const T mx = S.row(r).maxCoeff();
                S.row(r) = (S.row(r).array() - mx).exp();
                S.row(r) /= S.row(r).sum();
            }
            StridedMap<T> O(out.data() + off, L, dh, Eigen::OuterStride<>(D));
            O.noalias() = S * V;
            probs[si * heads + h] = std::move(S);
        }
    }
    auto y = make(std::move(out), {&q, &k, &v});
    Node<T>* yp = y.get();
    record(y, [q, k, v, yp, segments, heads, dh, sc, D, probs = std::move(probs)]() {
        const bool gq = wants_grad(q);
        const bool gk = wants_grad(k);
        const bool gv = wants_grad(v);
        Tensor<T>* dq = gq ? &q->grad_buffer() : nullptr;
        Tensor<T>* dk = gk ? &k->grad_buffer() : nullptr;
        Tensor<T>* dv = gv ? &v->grad_buffer() : nullptr;
        const std::size_t dim = q->value.cols();
        for (std::size_t si = 0; si < segments.size(); ++si) {
            const auto L = static_cast<Eigen::Index>(segments[si].length);
            if (L == 0) {
                continue;
            }
            const std::size_t base = segments[si].offset * dim;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = base + h * dh;
                const MatRM<T>& A = probs[si * heads + h];
                CStridedMap<T> dO(yp->grad.data() + off, L, dh, Eigen::OuterStride<>(D));
                CStridedMap<T> Q(q->value.data() + off, L, dh, Eigen::OuterStride<>(D));
                CStridedMap<T> K(k->value.data() + off, L, dh, Eigen::OuterStride<>(D));
                CStridedMap<T> V(v->value.data() + off, L, dh, Eigen::OuterStride<>(D));
                if (gv) {
                    StridedMap<T> dV(dv->data() + off, L, dh, Eigen::OuterStride<>(D));
                    dV.noalias() += A.transpose() * dO;
                }
                if (gq || gk) {
                    MatRM<T> dA = dO * V.transpose();
                    for (Eigen::Index r = 0; r < L; ++r) {
                        const T dot = (dA.row(r).array() * A.row(r).array()).sum();
                        dA.row(r) = (A.row(r).array() * (dA.row(r).array() - dot)).matrix();
                    }
                    if (gq) {
                        StridedMap<T> dQ(dq->data() + off, L, dh, Eigen::OuterStride<>(D));
                        dQ.noalias() += (dA * K) * sc;
                    }
                    if (gk) {
                        StridedMap<T> dK(dk->data() + off, L, dh, Eigen::OuterStride<>(D));
                        dK.noalias() += (dA.transpose() * Q) * sc;
                    }
                }
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::segment_mean(const Var<T>& x, const std::vector<Segment>& segments) {
    const std::size_t cols = x->value.cols();
    Tensor<T> out(segments.size(), cols);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        check(segments[s].length > 0, "segment_mean: empty segment");
        check(segments[s].offset + segments[s].length <= x->value.rows(),
              "segment_mean: segment outside input");
        T* o = out.row(s);
        for (std::size_t r = 0; r < segments[s].length; ++r) {
            const T* xr = x->value.row(segments[s].offset + r);
            for (std::size_t c = 0; c < cols; ++c) {
                o[c] += xr[c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] /= T(segments[s].length);
        }
    }
    auto y = make(std::move(out), {&x});
    Node<T>* yp = y.get();
    record(y, [x, yp, segments, cols]() {
        Tensor<T>& gx = x->grad_buffer();
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const T* g = yp->grad.row(s);
            const T inv = T(1) / T(segments[s].length);
            for (std::size_t r = 0; r < segments[s].length; ++r) {
                T* d = gx.row(segments[s].offset + r);
                for (std::size_t c = 0; c < cols; ++c) {
                    d[c] += g[c] * inv;
                }
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::l2_normalize_rows(const Var<T>& x, T eps) {
    const std::size_t rows = x->value.rows();
    const std::size_t cols = x->value.cols();
    std::vector<T> norms(rows);
    Tensor<T> out(x->value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x->value.row(r);
        T sq = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            sq += xr[c] * xr[c];
        }
        norms[r] = std::max(std::sqrt(sq), eps);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xr[c] / norms[r];
        }
    }
    auto y = make(std::move(out), {&x});
    Node<T>* yp = y.get();
    record(y, [x, yp, norms = std::move(norms), rows, cols, eps]() {
        Tensor<T>& gx = x->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* g = yp->grad.row(r);
            const T* yr = yp->value.row(r);
            T* d = gx.row(r);
            if (norms[r] <= eps) {
                for (std::size_t c = 0; c < cols; ++c) {
                    d[c] += g[c] / eps;
                }
                continue;
            }
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                dot += g[c] * yr[c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
                d[c] += (g[c] - yr[c] * dot) / norms[r];
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::mse_masked(const Var<T>& pred, const Var<T>& target, const Var<T>& mask) {
    check(pred->value.same_shape(target->value) && pred->value.same_shape(mask->value),
          fmt::format("mse_masked: shapes differ ({}, {}, {})", shape_str(pred->value.shape()),
                      shape_str(target->value.shape()), shape_str(mask->value.shape())));
    T total = 0;
    T weight = 0;
    const std::size_t n = pred->value.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T m = mask->value[i];
        const T d = pred->value[i] - target->value[i];
        total += m * d * d;
        weight += m;
    }
    const T loss = weight > T(0) ? total / weight : T(0);
    auto y = make(Tensor<T>::scalar(loss), {&pred, &target});
    Node<T>* yp = y.get();
    record(y, [pred, target, mask, yp, weight, n]() {
        if (weight <= T(0)) {
            return;
        }
        const T g = yp->grad[0] * T(2) / weight;
        if (wants_grad(pred)) {
            Tensor<T>& gp = pred->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                gp[i] += g * mask->value[i] * (pred->value[i] - target->value[i]);
            }
        }
        if (wants_grad(target)) {
            Tensor<T>& gt = target->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                gt[i] -= g * mask->value[i] * (pred->value[i] - target->value[i]);
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::cross_entropy(const Var<T>& logits, const std::vector<std::int64_t>& labels,
                              bool exclude_diagonal) {
    const std::size_t rows = logits->value.rows();
    const std::size_t cols = logits->value.cols();
    check(labels.size() == rows, "cross_entropy: label count differs from row count");
    check(rows > 0, "cross_entropy: empty batch");
    if (exclude_diagonal) {
        check(cols >= rows, "cross_entropy: diagonal exclusion needs cols >= rows");
    }
    Tensor<T> probs(logits->value.shape());
    T loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto lab = labels[r];
        check(lab >= 0 && static_cast<std::size_t>(lab) < cols, "cross_entropy: label out of range");
        check(!(exclude_diagonal && static_cast<std::size_t>(lab) == r),
              "cross_entropy: label on excluded diagonal");
        const T* lr = logits->value.row(r);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            if (!(exclude_diagonal && c == r)) {
                mx = std::max(mx, lr[c]);
            }
        }
        T total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (exclude_diagonal && c == r) {
                continue;
            }
            const T e = std::exp(lr[c] - mx);
            probs[r * cols + c] = e;
            total += e;
        }
        for (std::size_t c = 0; c < cols; ++c) {
            probs[r * cols + c] /= total;
        }
        loss += mx + std::log(total) - lr[lab];
    }
    loss /= T(rows);
    auto y = make(Tensor<T>::scalar(loss), {&logits});
    Node<T>* yp = y.get();
    record(y, [logits, labels, yp, probs = std::move(probs), rows, cols]() {
        Tensor<T>& gl = logits->grad_buffer();
        const T g = yp->grad[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                gl[r * cols + c] += g * probs[r * cols + c];
            }
            gl[r * cols + static_cast<std::size_t>(labels[r])] -= g;
        }
    });
    return y;
}

namespace {

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t ho = g.out_height();
    const std::size_t wo = g.out_width();
    const std::size_t plane = ho * wo;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++row) {
                T* dst = col + row * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 &&
                                            iy < static_cast<std::ptrdiff_t>(g.height) &&
                                            ix < static_cast<std::ptrdiff_t>(g.width);
                        dst[oy * wo + ox] =
                            inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                         static_cast<std::size_t>(ix)]
                                   : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t ho = g.out_height();
    const std::size_t wo = g.out_width();
    const std::size_t plane = ho * wo;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx, ++row) {
                const T* src = col + row * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        continue;
                    }
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) {
                            continue;
                        }
                        img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                            static_cast<std::size_t>(ix)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> Tape<T>::conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                       const ConvGeometry& geom) {
    const std::size_t batch = x->value.rows();
    const std::size_t in_size = geom.in_channels * geom.height * geom.width;
    check(x->value.cols() == in_size,
          fmt::format("conv2d: input width {} does not match geometry {}", x->value.cols(), in_size));
    const std::size_t patch = geom.in_channels * geom.kernel_h * geom.kernel_w;
    check(weight->value.cols() == patch, "conv2d: weight width does not match kernel geometry");
    const std::size_t cout = weight->value.rows();
    if (bias) {
        check(bias->value.size() == cout, "conv2d: bias length does not match output channels");
    }
    const std::size_t plane = geom.out_height() * geom.out_width();
    Tensor<T> cols(Shape{batch, patch * plane});
    Tensor<T> out(batch, cout * plane);
    auto W = as_matrix(weight->value);
    for (std::size_t b = 0; b < batch; ++b) {
        im2col(x->value.row(b), geom, cols.row(b));
        CMapRM<T> C(cols.row(b), patch, plane);
        MapRM<T> O(out.row(b), cout, plane);
        O.noalias() = W * C;
        if (bias) {
            for (std::size_t o = 0; o < cout; ++o) {
                O.row(o).array() += bias->value[o];
            }
        }
    }
    auto y = make(std::move(out), {&x, &weight, &bias});
    Node<T>* yp = y.get();
    record(y, [x, weight, bias, yp, geom, cols = std::move(cols), batch, patch, plane, cout]() {
        auto W = as_matrix(static_cast<const Tensor<T>&>(weight->value));
        MatRM<T> dcol(patch, plane);
        for (std::size_t b = 0; b < batch; ++b) {
            CMapRM<T> dO(yp->grad.row(b), cout, plane);
            if (wants_grad(weight)) {
                CMapRM<T> C(cols.row(b), patch, plane);
                as_matrix(weight->grad_buffer()).noalias() += dO * C.transpose();
            }
            if (wants_grad(bias)) {
                Tensor<T>& gb = bias->grad_buffer();
                for (std::size_t o = 0; o < cout; ++o) {
                    gb[o] += dO.row(o).sum();
                }
            }
            if (wants_grad(x)) {
                dcol.noalias() = W.transpose() * dO;
                col2im_add(dcol.data(), geom, x->grad_buffer().row(b));
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::batch_norm_train(const Var<T>& x, std::size_t channels, T eps,
                                 std::vector<T>* batch_mean, std::vector<T>* batch_var) {
    const std::size_t batch = x->value.rows();
    const std::size_t width = x->value.cols();
    check(channels > 0 && width % channels == 0, "batch_norm: width not divisible by channels");
    const std::size_t spatial = width / channels;
    const std::size_t count = batch * spatial;
    check(count > 1, "batch_norm: need more than one value per channel in training mode");
    std::vector<T> mu(channels, T(0));
    std::vector<T> inv_std(channels);
    std::vector<T> var(channels, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xr = x->value.row(b);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t s = 0; s < spatial; ++s) {
                mu[c] += xr[c * spatial + s];
            }
        }
    }
    for (auto& m : mu) {
        m /= T(count);
    }
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xr = x->value.row(b);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t s = 0; s < spatial; ++s) {
                const T d = xr[c * spatial + s] - mu[c];
                var[c] += d * d;
            }
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
        var[c] /= T(count);
        inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    }
    if (batch_mean) {
        *batch_mean = mu;
    }
    if (batch_var) {
        batch_var->resize(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            (*batch_var)[c] = var[c] * T(count) / T(count - 1);
        }
    }
    Tensor<T> out(x->value.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xr = x->value.row(b);
        T* o = out.row(b);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t s = 0; s < spatial; ++s) {
                o[c * spatial + s] = (xr[c * spatial + s] - mu[c]) * inv_std[c];
            }
        }
    }
    auto y = make(std::move(out), {&x});
    Node<T>* yp = y.get();
    record(y, [x, yp, inv_std = std::move(inv_std), batch, channels, spatial, count]() {
        Tensor<T>& gx = x->grad_buffer();
        const Tensor<T>& g = yp->grad;
        const Tensor<T>& n = yp->value;
        for (std::size_t c = 0; c < channels; ++c) {
            T mean_g = 0;
            T mean_gn = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t s = 0; s < spatial; ++s) {
                    const std::size_t i = b * channels * spatial + c * spatial + s;
                    mean_g += g[i];
                    mean_gn += g[i] * n[i];
                }
            }
            mean_g /= T(count);
            mean_gn /= T(count);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t s = 0; s < spatial; ++s) {
                    const std::size_t i = b * channels * spatial + c * spatial + s;
                    gx[i] += inv_std[c] * (g[i] - mean_g - n[i] * mean_gn);
                }
            }
        }
    });
    return y;
}

template <typename T>
Var<T> Tape<T>::batch_norm_eval(const Var<T>& x, std::size_t channels, const std::vector<T>& mean,
                                const std::vector<T>& var, T eps) {
    const std::size_t width = x->value.cols();
    check(channels > 0 && width % channels == 0, "batch_norm: width not divisible by channels");
    check(mean.size() == channels && var.size() == channels,
          "batch_norm: running statistics do not match channel count");
    const std::size_t spatial = width / channels;
    std::vector<T> inv_std(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        inv_std[c] = T(1) / std::sqrt(var[c] + eps);
    }
    Tensor<T> out(x->value.shape());
    for (std::size_t b = 0; b < x->value.rows(); ++b) {
        const T* xr = x->value.row(b);
        T* o = out.row(b);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t s = 0; s < spatial; ++s) {
                o[c * spatial + s] = (xr[c * spatial + s] - mean[c]) * inv_std[c];
            }
        }
    }
    auto y = make(std::move(out), {&x});
    Node<T>* yp = y.get();
    record(y, [x, yp, inv_std = std::move(inv_std), channels, spatial]() {
        Tensor<T>& gx = x->grad_buffer();
        for (std::size_t b = 0; b < gx.rows(); ++b) {
            const T* g = yp->grad.row(b);
            T* d = gx.row(b);
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t s = 0; s < spatial; ++s) {
                    d[c * spatial + s] += g[c * spatial + s] * inv_std[c];
                }
            }
        }
    });
    return y;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    require(loss->value.size() == 1, ErrorKind::Dimension, "backward: loss must be a scalar");
    if (!loss->requires_grad) {
        return;
    }
    loss->grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (n.backward && n.has_grad()) {
            n.backward();
        }
    }
}

template float gelu_scalar<float>(float);
template double gelu_scalar<double>(double);

template class Tape<float>;
template class Tape<double>;

}  // namespace sane::num
