// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Tensors are shared handles to flat numeric buffers. Operations record a
// backward closure on a thread-local tape; backward(loss) replays the tape
// in reverse execution order exactly once and then clears it. There are no
// views or strides: every op materializes its output. The only broadcasting
// rule is suffix broadcast on add (bias over leading batch axes); any other
// shape mismatch throws.
//
// Works in float (training) and double (gradient checks and oracles).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ebkit/errors.hpp"
#include "ebkit/rng.hpp"

namespace ebkit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// Integer index batch (token ids, class targets). Not differentiable.
struct IdArray {
    Shape shape;
    std::vector<std::int32_t> ids;

    std::size_t size() const { return ids.size(); }
};

// Thread-local switch: when false, ops do not record backward closures.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Thread-local switch for post-op finiteness checks (on by default).
inline bool& numeric_checks_flag() {
    thread_local bool enabled = true;
    return enabled;
}

namespace detail {

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation; empty means all-zero
    bool requires_grad = false;
};

template <typename S>
std::vector<S>& grad_buf(const std::shared_ptr<TensorNode<S>>& node) {
    if (node->grad.empty()) node->grad.assign(node->data.size(), S(0));
    return node->grad;
}

}  // namespace detail

// Ordered record of executed ops; reverse replay implements backprop.
// One tape per thread per scalar type.
template <typename S>
class Tape {
public:
    static Tape& current() {
        thread_local Tape tape;
        return tape;
    }

    void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return entries_.size(); }

    // Runs every recorded closure exactly once, newest first, then resets.
    void run_reverse_and_clear() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
        entries_.clear();
    }

    void clear() { entries_.clear(); }

private:
    std::vector<std::function<void()>> entries_;
};

template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {}, S(0));
    }

    static Tensor full(Shape shape, S value) {
        return from_data(std::move(shape), {}, value);
    }

    static Tensor scalar(S value) { return from_data({1}, {value}); }

    static Tensor from_data(Shape shape, std::vector<S> values, S fill = S(0)) {
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
        }
        auto node = std::make_shared<detail::TensorNode<S>>();
        std::size_t n = numel(shape);
        node->shape = std::move(shape);
        if (values.empty()) {
            node->data.assign(n, fill);
        } else {
            if (values.size() != n)
                throw ShapeError("data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(node->shape));
            node->data = std::move(values);
        }
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const S> data() const { return node_->data; }
    // Direct buffer mutation bypasses autodiff; only touch parameters
    // between optimizer steps.
    std::span<S> mutable_data() { return node_->data; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        node_->requires_grad = value;
        return *this;
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Gradient buffer; allocated as zeros on first access.
    std::span<S> grad() { return detail::grad_buf(node_); }
    std::span<const S> grad() const { return detail::grad_buf(node_); }
    void clear_grad() { node_->grad.clear(); }

    S item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->data[0];
    }

    // Deep copy of shape and data; gradient state is not copied.
    Tensor clone() const {
        Tensor t = from_data(node_->shape, node_->data);
        return t;
    }

    const std::shared_ptr<detail::TensorNode<S>>& node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode<S>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, const char* op_name) {
    if (!numeric_checks_flag()) return;
    for (S v : t.data()) {
        if (!std::isfinite(v))
            throw NumericsError(std::string(op_name) + " produced a non-finite value");
    }
}

template <typename S>
bool tracks(const Tensor<S>& t) {
    return grad_mode_flag() && t.requires_grad();
}

// C (m x n) += or = A (m x k) * B (k x n)
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            if (av == S(0)) continue;
            const S* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m x n) += A (m x k) * B^T where B is (n x k)
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C (k x n) += A^T * B where A is (m x k), B is (m x n)
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t r = 0; r < m; ++r) {
        const S* arow = a + r * k;
        const S* brow = b + r * n;
        for (std::size_t i = 0; i < k; ++i) {
            S av = arow[i];
            if (av == S(0)) continue;
            S* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// --- matmul -----------------------------------------------------------------
//
// Accepted forms, all strict:
//   (m,k) x (k,n)                 -> (m,n)
//   (...,k) x (k,n)               -> (...,n)   rows share the rank-2 rhs
//   (L...,m,k) x (L...,k,n)       -> (L...,m,n) identical leading extents
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 1 || bs.size() < 2)
        throw ShapeError("matmul: need lhs rank>=1 and rhs rank>=2, got " + shape_str(as) + " x " +
                         shape_str(bs));

    if (bs.size() == 2) {
        std::size_t k = as.back();
        if (k != bs[0])
            throw ShapeError("matmul: inner extents disagree, " + shape_str(as) + " x " +
                             shape_str(bs));
        std::size_t n = bs[1];
        std::size_t rows = a.size() / k;
        Shape out_shape(as.begin(), as.end() - 1);
        out_shape.push_back(n);
        Tensor<S> out = Tensor<S>::zeros(out_shape);
        detail::gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), rows, k, n,
                        false);
        detail::check_finite(out, "matmul");
        if (detail::tracks(a) || detail::tracks(b)) {
            out.set_requires_grad(true);
            auto an = a.node(), bn = b.node(), on = out.node();
            Tape<S>::current().record([an, bn, on, rows, k, n] {
                if (on->grad.empty()) return;
                const S* g = on->grad.data();
                if (an->requires_grad)
                    detail::gemm_nt_acc(g, bn->data.data(), detail::grad_buf(an).data(), rows, n,
                                        k);
                if (bn->requires_grad)
                    detail::gemm_tn_acc(an->data.data(), g, detail::grad_buf(bn).data(), rows, k,
                                        n);
            });
        }
        return out;
    }

    if (as.size() != bs.size())
        throw ShapeError("matmul: rank mismatch " + shape_str(as) + " x " + shape_str(bs));
    std::size_t r = as.size();
    for (std::size_t i = 0; i + 2 < r; ++i) {
        if (as[i] != bs[i])
            throw ShapeError("matmul: leading extents disagree, " + shape_str(as) + " x " +
                             shape_str(bs));
    }
    std::size_t m = as[r - 2], k = as[r - 1];
    if (k != bs[r - 2])
        throw ShapeError("matmul: inner extents disagree, " + shape_str(as) + " x " +
                         shape_str(bs));
    std::size_t n = bs[r - 1];
    std::size_t batches = 1;
    for (std::size_t i = 0; i + 2 < r; ++i) batches *= as[i];

    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    {
        const S* ap = a.data().data();
        const S* bp = b.data().data();
        S* cp = out.mutable_data().data();
        for (std::size_t l = 0; l < batches; ++l)
            detail::gemm_nn(ap + l * m * k, bp + l * k * n, cp + l * m * n, m, k, n, true);
    }
    detail::check_finite(out, "matmul");
    if (detail::tracks(a) || detail::tracks(b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<S>::current().record([an, bn, on, batches, m, k, n] {
            if (on->grad.empty()) return;
            const S* g = on->grad.data();
            for (std::size_t l = 0; l < batches; ++l) {
                if (an->requires_grad)
                    detail::gemm_nt_acc(g + l * m * n, bn->data.data() + l * k * n,
                                        detail::grad_buf(an).data() + l * m * k, m, n, k);
                if (bn->requires_grad)
                    detail::gemm_tn_acc(an->data.data() + l * m * k, g + l * m * n,
                                        detail::grad_buf(bn).data() + l * k * n, m, k, n);
            }
        });
    }
    return out;
}

// --- add --------------------------------------------------------------------
//
// Same-shape elementwise add, or suffix broadcast: b.shape must equal a
// trailing suffix of a.shape (bias over the leading batch axes).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    bool suffix = bs.size() <= as.size() &&
                  std::equal(bs.begin(), bs.end(), as.end() - bs.size());
    if (!suffix)
        throw ShapeError("add: " + shape_str(bs) + " is not a trailing suffix of " +
                         shape_str(as));
    std::size_t bn_count = numel(bs);
    Tensor<S> out = Tensor<S>::zeros(as);
    {
        const S* ap = a.data().data();
        const S* bp = b.data().data();
        S* op = out.mutable_data().data();
        std::size_t n = a.size();
        for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i % bn_count];
    }
    detail::check_finite(out, "add");
    if (detail::tracks(a) || detail::tracks(b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bnn = b.node(), on = out.node();
        Tape<S>::current().record([an, bnn, on, bn_count] {
            if (on->grad.empty()) return;
            const std::vector<S>& g = on->grad;
            if (an->requires_grad) {
                std::vector<S>& ga = detail::grad_buf(an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bnn->requires_grad) {
                std::vector<S>& gb = detail::grad_buf(bnn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % bn_count] += g[i];
            }
        });
    }
    return out;
}

// --- scale (multiply by a compile-time-known constant) -----------------------
template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < x.size(); ++i) op[i] = c * xp[i];
    }
    detail::check_finite(out, "scale");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on, c] {
            if (on->grad.empty()) return;
            std::vector<S>& gx = detail::grad_buf(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += c * on->grad[i];
        });
    }
    return out;
}

// --- elementwise multiply -----------------------------------------------------
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    {
        const S* ap = a.data().data();
        const S* bp = b.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * bp[i];
    }
    detail::check_finite(out, "mul");
    if (detail::tracks(a) || detail::tracks(b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape<S>::current().record([an, bn, on] {
            if (on->grad.empty()) return;
            const std::vector<S>& g = on->grad;
            if (an->requires_grad) {
                std::vector<S>& ga = detail::grad_buf(an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                std::vector<S>& gb = detail::grad_buf(bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
            }
        });
    }
    return out;
}

// --- sum to scalar ------------------------------------------------------------
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    S acc = S(0);
    for (S v : x.data()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    detail::check_finite(out, "sum");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on] {
            if (on->grad.empty()) return;
            S g = on->grad[0];
            std::vector<S>& gx = detail::grad_buf(xn);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// --- relu ----------------------------------------------------------------------
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < x.size(); ++i) op[i] = xp[i] > S(0) ? xp[i] : S(0);
    }
    detail::check_finite(out, "relu");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on] {
            if (on->grad.empty()) return;
            std::vector<S>& gx = detail::grad_buf(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (xn->data[i] > S(0)) gx[i] += on->grad[i];
        });
    }
    return out;
}

// --- gelu (exact Gaussian-CDF form) ---------------------------------------------
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = static_cast<double>(xp[i]);
            op[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
        }
    }
    detail::check_finite(out, "gelu");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on] {
            if (on->grad.empty()) return;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            std::vector<S>& gx = detail::grad_buf(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                double v = static_cast<double>(xn->data[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += on->grad[i] * static_cast<S>(cdf + v * pdf);
            }
        });
    }
    return out;
}

namespace detail {

// Shared softmax backward: dx_j += y_j * (g_j - sum_k g_k y_k), row-wise.
template <typename S>
void softmax_backward_rows(const std::vector<S>& y, const std::vector<S>& g, std::vector<S>& gx,
                           std::size_t outer, std::size_t len, std::size_t inner) {
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * len * inner + in;
            S dot = S(0);
            for (std::size_t j = 0; j < len; ++j) {
                std::size_t idx = base + j * inner;
                dot += g[idx] * y[idx];
            }
            for (std::size_t j = 0; j < len; ++j) {
                std::size_t idx = base + j * inner;
                gx[idx] += y[idx] * (g[idx] - dot);
            }
        }
    }
}

}  // namespace detail

// --- softmax along an axis (max-subtracted) ---------------------------------------
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
    const Shape& xs = x.shape();
    if (axis >= xs.size())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(xs));
    std::size_t outer = 1, inner = 1, len = xs[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
    for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];

    Tensor<S> out = Tensor<S>::zeros(xs);
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = o * len * inner + in;
                S mx = xp[base];
                for (std::size_t j = 1; j < len; ++j)
                    mx = std::max(mx, xp[base + j * inner]);
                S denom = S(0);
                for (std::size_t j = 0; j < len; ++j) {
                    S e = std::exp(xp[base + j * inner] - mx);
                    op[base + j * inner] = e;
                    denom += e;
                }
                for (std::size_t j = 0; j < len; ++j) op[base + j * inner] /= denom;
            }
        }
    }
    detail::check_finite(out, "softmax");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on, outer, len, inner] {
            if (on->grad.empty()) return;
            detail::softmax_backward_rows(on->data, on->grad, detail::grad_buf(xn), outer, len,
                                          inner);
        });
    }
    return out;
}

// --- causal masked softmax ----------------------------------------------------
//
// x has shape (..., T, T); row i of each trailing matrix is normalized over
// columns j <= i, columns j > i are exactly zero. Masked columns never enter
// the max or the sum, so future positions cannot perturb the result even in
// the last bit.
template <typename S>
Tensor<S> causal_masked_softmax(const Tensor<S>& x) {
    const Shape& xs = x.shape();
    if (xs.size() < 2 || xs[xs.size() - 1] != xs[xs.size() - 2])
        throw ShapeError("causal_masked_softmax: need trailing square matrix, got " +
                         shape_str(xs));
    std::size_t t = xs.back();
    std::size_t mats = x.size() / (t * t);

    Tensor<S> out = Tensor<S>::zeros(xs);
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t l = 0; l < mats; ++l) {
            for (std::size_t i = 0; i < t; ++i) {
                std::size_t base = (l * t + i) * t;
                S mx = xp[base];
                for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, xp[base + j]);
                S denom = S(0);
                for (std::size_t j = 0; j <= i; ++j) {
                    S e = std::exp(xp[base + j] - mx);
                    op[base + j] = e;
                    denom += e;
                }
                for (std::size_t j = 0; j <= i; ++j) op[base + j] /= denom;
            }
        }
    }
    detail::check_finite(out, "causal_masked_softmax");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        std::size_t rows = mats * t;
        Tape<S>::current().record([xn, on, rows, t] {
            if (on->grad.empty()) return;
            // y is zero on masked columns, so the unmasked formula is exact.
            detail::softmax_backward_rows(on->data, on->grad, detail::grad_buf(xn), rows, t,
                                          std::size_t(1));
        });
    }
    return out;
}

// --- layer norm over the last axis ------------------------------------------------
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
    const Shape& xs = x.shape();
    std::size_t d = xs.back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    std::size_t rows = x.size() / d;

    Tensor<S> out = Tensor<S>::zeros(xs);
    std::vector<S> xhat(x.size());
    std::vector<S> inv_std(rows);
    {
        const S* xp = x.data().data();
        const S* gp = gain.data().data();
        const S* bp = bias.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const S* row = xp + r * d;
            S mean = S(0);
            for (std::size_t j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<S>(d);
            S var = S(0);
            for (std::size_t j = 0; j < d; ++j) {
                S c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<S>(d);
            S istd = S(1) / std::sqrt(var + eps);
            inv_std[r] = istd;
            for (std::size_t j = 0; j < d; ++j) {
                S xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                op[r * d + j] = xh * gp[j] + bp[j];
            }
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::tracks(x) || detail::tracks(gain) || detail::tracks(bias)) {
        out.set_requires_grad(true);
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        Tape<S>::current().record(
            [xn, gn, bn, on, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                if (on->grad.empty()) return;
                const std::vector<S>& g = on->grad;
                if (bn->requires_grad) {
                    std::vector<S>& gb = detail::grad_buf(bn);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                }
                if (gn->requires_grad) {
                    std::vector<S>& gg = detail::grad_buf(gn);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < d; ++j)
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                }
                if (xn->requires_grad) {
                    std::vector<S>& gx = detail::grad_buf(xn);
                    for (std::size_t r = 0; r < rows; ++r) {
                        S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                        for (std::size_t j = 0; j < d; ++j) {
                            S dxh = g[r * d + j] * gn->data[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= static_cast<S>(d);
                        mean_dxhat_xhat /= static_cast<S>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            S dxh = g[r * d + j] * gn->data[j];
                            gx[r * d + j] += inv_std[r] * (dxh - mean_dxhat -
                                                           xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            });
    }
    return out;
}

// --- embedding lookup ---------------------------------------------------------
template <typename S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const IdArray& ids) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
    std::size_t vocab = table.shape()[0];
    std::size_t dim = table.shape()[1];
    for (std::int32_t id : ids.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw IndexError("embedding_lookup: token id " + std::to_string(id) +
                             " out of range [0," + std::to_string(vocab) + ")");
    }
    Shape out_shape = ids.shape;
    out_shape.push_back(dim);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    {
        const S* tp = table.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < ids.ids.size(); ++i)
            std::copy_n(tp + static_cast<std::size_t>(ids.ids[i]) * dim, dim, op + i * dim);
    }
    detail::check_finite(out, "embedding_lookup");
    if (detail::tracks(table)) {
        out.set_requires_grad(true);
        auto tn = table.node(), on = out.node();
        std::vector<std::int32_t> idv = ids.ids;
        Tape<S>::current().record([tn, on, idv = std::move(idv), dim] {
            if (on->grad.empty()) return;
            std::vector<S>& gt = detail::grad_buf(tn);
            for (std::size_t i = 0; i < idv.size(); ++i) {
                S* dst = gt.data() + static_cast<std::size_t>(idv[i]) * dim;
                const S* src = on->grad.data() + i * dim;
                for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// --- cross entropy (mean over batch of -log softmax[target]) --------------------
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::int32_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2");
    std::size_t b = logits.shape()[0];
    std::size_t c = logits.shape()[1];
    if (targets.size() != b)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " rows");
    for (std::int32_t t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw IndexError("cross_entropy: target class " + std::to_string(t) +
                             " out of range [0," + std::to_string(c) + ")");

    std::vector<S> probs(logits.size());
    S loss = S(0);
    {
        const S* lp = logits.data().data();
        for (std::size_t i = 0; i < b; ++i) {
            const S* row = lp + i * c;
            S mx = row[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            S denom = S(0);
            for (std::size_t j = 0; j < c; ++j) {
                S e = std::exp(row[j] - mx);
                probs[i * c + j] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
            loss += std::log(denom) + mx - row[targets[i]];
        }
        loss /= static_cast<S>(b);
    }
    Tensor<S> out = Tensor<S>::scalar(loss);
    detail::check_finite(out, "cross_entropy");
    if (detail::tracks(logits)) {
        out.set_requires_grad(true);
        auto ln = logits.node(), on = out.node();
        std::vector<std::int32_t> tv = targets;
        Tape<S>::current().record([ln, on, probs = std::move(probs), tv = std::move(tv), b, c] {
            if (on->grad.empty()) return;
            S g = on->grad[0];
            std::vector<S>& gl = detail::grad_buf(ln);
            S inv_b = S(1) / static_cast<S>(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    S delta = (static_cast<std::size_t>(tv[i]) == j) ? S(1) : S(0);
                    gl[i * c + j] += g * (probs[i * c + j] - delta) * inv_b;
                }
            }
        });
    }
    return out;
}

namespace detail {

// Records a pure index-permutation/selection op: out[i] = x[map(i)] with the
// backward scatter gx[map(i)] += g[i].
template <typename S, typename MapFn>
Tensor<S> gather_op(const Tensor<S>& x, Shape out_shape, const char* name, MapFn map) {
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < out.size(); ++i) op[i] = xp[map(i)];
    }
    check_finite(out, name);
    if (tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on, map] {
            if (on->grad.empty()) return;
            std::vector<S>& gx = grad_buf(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[map(i)] += on->grad[i];
        });
    }
    return out;
}

}  // namespace detail

// --- reshape -------------------------------------------------------------------
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    return detail::gather_op(x, std::move(new_shape), "reshape",
                             [](std::size_t i) { return i; });
}

// --- transpose of the last two axes ----------------------------------------------
template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
    const Shape& xs = x.shape();
    if (xs.size() < 2) throw ShapeError("transpose_last2: need rank >= 2");
    std::size_t r = xs.size(), m = xs[r - 2], n = xs[r - 1];
    Shape out_shape = xs;
    std::swap(out_shape[r - 2], out_shape[r - 1]);
    std::size_t mat = m * n;
    return detail::gather_op(x, std::move(out_shape), "transpose_last2",
                             [mat, m, n](std::size_t i) {
                                 std::size_t l = i / mat, rem = i % mat;
                                 std::size_t row = rem / m, col = rem % m;
                                 return l * mat + col * n + row;
                             });
}

// --- head split/merge -------------------------------------------------------------
//
// split_heads: (B,T,H*dh) -> (B,H,T,dh); merge_heads is the inverse.
template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, std::size_t heads) {
    const Shape& xs = x.shape();
    if (xs.size() != 3 || xs[2] % heads != 0)
        throw ShapeError("split_heads: need (B,T,D) with D divisible by heads");
    std::size_t bsz = xs[0], t = xs[1], d = xs[2], dh = d / heads;
    return detail::gather_op(x, Shape{bsz, heads, t, dh}, "split_heads",
                             [heads, t, d, dh](std::size_t i) {
                                 std::size_t dd = i % dh;
                                 std::size_t tt = (i / dh) % t;
                                 std::size_t h = (i / (dh * t)) % heads;
                                 std::size_t b = i / (dh * t * heads);
                                 return (b * t + tt) * d + h * dh + dd;
                             });
}

template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("merge_heads: need (B,H,T,dh)");
    std::size_t bsz = xs[0], heads = xs[1], t = xs[2], dh = xs[3], d = heads * dh;
    return detail::gather_op(x, Shape{bsz, t, d}, "merge_heads",
                             [heads, t, d, dh](std::size_t i) {
                                 std::size_t dd = i % dh;
                                 std::size_t h = (i / dh) % heads;
                                 std::size_t tt = (i / d) % t;
                                 std::size_t b = i / (d * t);
                                 return ((b * heads + h) * t + tt) * dh + dd;
                             });
}

// --- class-token prepend -----------------------------------------------------------
//
// (B,T,D) + token (D) -> (B,T+1,D) with the token at position 0 of every row.
template <typename S>
Tensor<S> prepend_token(const Tensor<S>& x, const Tensor<S>& token) {
    const Shape& xs = x.shape();
    if (xs.size() != 3) throw ShapeError("prepend_token: need (B,T,D)");
    std::size_t bsz = xs[0], t = xs[1], d = xs[2];
    if (token.shape() != Shape{d})
        throw ShapeError("prepend_token: token must have shape [" + std::to_string(d) + "]");
    Tensor<S> out = Tensor<S>::zeros({bsz, t + 1, d});
    {
        const S* xp = x.data().data();
        const S* tp = token.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t b = 0; b < bsz; ++b) {
            std::copy_n(tp, d, op + b * (t + 1) * d);
            std::copy_n(xp + b * t * d, t * d, op + b * (t + 1) * d + d);
        }
    }
    detail::check_finite(out, "prepend_token");
    if (detail::tracks(x) || detail::tracks(token)) {
        out.set_requires_grad(true);
        auto xn = x.node(), tn = token.node(), on = out.node();
        Tape<S>::current().record([xn, tn, on, bsz, t, d] {
            if (on->grad.empty()) return;
            const std::vector<S>& g = on->grad;
            if (tn->requires_grad) {
                std::vector<S>& gt = detail::grad_buf(tn);
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t j = 0; j < d; ++j) gt[j] += g[b * (t + 1) * d + j];
            }
            if (xn->requires_grad) {
                std::vector<S>& gx = detail::grad_buf(xn);
                for (std::size_t b = 0; b < bsz; ++b)
                    for (std::size_t i = 0; i < t * d; ++i)
                        gx[b * t * d + i] += g[b * (t + 1) * d + d + i];
            }
        });
    }
    return out;
}

// --- positional readout --------------------------------------------------------
//
// (B,T,D) -> (B,D), the representation at sequence position `pos`.
template <typename S>
Tensor<S> take_position(const Tensor<S>& x, std::size_t pos) {
    const Shape& xs = x.shape();
    if (xs.size() != 3) throw ShapeError("take_position: need (B,T,D)");
    std::size_t t = xs[1], d = xs[2];
    if (pos >= t)
        throw IndexError("take_position: position " + std::to_string(pos) + " out of range [0," +
                         std::to_string(t) + ")");
    return detail::gather_op(x, Shape{xs[0], d}, "take_position",
                             [t, d, pos](std::size_t i) {
                                 std::size_t b = i / d, j = i % d;
                                 return (b * t + pos) * d + j;
                             });
}

// --- dropout --------------------------------------------------------------------
//
// Inverted dropout driven by an explicit stream; rate 0 returns the input
// tensor unchanged.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, CounterRng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    std::vector<S> mask(x.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.next_unit() >= rate ? keep_scale : S(0);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    {
        const S* xp = x.data().data();
        S* op = out.mutable_data().data();
        for (std::size_t i = 0; i < x.size(); ++i) op[i] = xp[i] * mask[i];
    }
    detail::check_finite(out, "dropout");
    if (detail::tracks(x)) {
        out.set_requires_grad(true);
        auto xn = x.node(), on = out.node();
        Tape<S>::current().record([xn, on, mask = std::move(mask)] {
            if (on->grad.empty()) return;
            std::vector<S>& gx = detail::grad_buf(xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i] * mask[i];
        });
    }
    return out;
}

// --- backward ---------------------------------------------------------------------
//
// Seeds d(loss)/d(loss) = 1, replays the thread's tape in reverse execution
// order, and clears it. Gradients accumulate into every requires_grad tensor
// on the path; tensors off the path keep (or lazily get) zero gradients.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw ContractError("backward: loss is not connected to any parameter");
    detail::grad_buf(loss.node())[0] = S(1);
    Tape<S>::current().run_reverse_and_clear();
}

}  // namespace ebkit
