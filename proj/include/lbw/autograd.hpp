// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "lbw/error.hpp"

namespace lbw {

/// Dense row-major matrix.
template <class T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c, T fill = T(0)) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}
    Mat(int r, int c, std::vector<T> data) : rows(r), cols(c), v(std::move(data)) {
        LBW_REQUIRE(v.size() == static_cast<size_t>(r) * c, ErrorCode::invalid_argument, "matrix data size mismatch");
    }

    T& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    T operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    T* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Mat&) const = default;

    template <class U>
    Mat<U> cast() const {
        Mat<U> m(rows, cols);
        for (size_t i = 0; i < v.size(); ++i) m.v[i] = static_cast<U>(v[i]);
        return m;
    }
};

template <class T>
T max_abs_diff(const Mat<T>& a, const Mat<T>& b) {
    LBW_REQUIRE(a.same_shape(b), ErrorCode::invalid_argument, "shape mismatch");
    T m = 0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

namespace kernel {

/// c += a * b, a: n x k, b: k x m.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        T* ci = c + static_cast<size_t>(i) * m;
        const T* ai = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T s = ai[p];
            if (s == T(0)) continue;
            const T* bp = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) ci[j] += s * bp[j];
        }
    }
}

/// c += a * b^T, a: n x k, b: m x k.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const T* ai = a + static_cast<size_t>(i) * k;
        T* ci = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const T* bj = b + static_cast<size_t>(j) * k;
            T s = 0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

/// c += a^T * b, a: k x n, b: k x m.
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int k, int n, int m) {
    for (int p = 0; p < k; ++p) {
        const T* ap = a + static_cast<size_t>(p) * n;
        const T* bp = b + static_cast<size_t>(p) * m;
        for (int i = 0; i < n; ++i) {
            const T s = ap[i];
            if (s == T(0)) continue;
            T* ci = c + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) ci[j] += s * bp[j];
        }
    }
}

}  // namespace kernel

template <class T>
struct Node {
    Mat<T> value;
    Mat<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Mat<T>& grad_buffer() {
        if (grad.size() != value.size()) grad = Mat<T>(value.rows, value.cols);
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    const Mat<T>& value() const { return n_->value; }
    Mat<T>& mutable_value() { return n_->value; }
    const Mat<T>& grad() const { return n_->grad; }
    bool has_grad() const { return n_->grad.size() == n_->value.size() && n_->grad.size() > 0; }
    int rows() const { return n_->value.rows; }
    int cols() const { return n_->value.cols; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool on) { n_->requires_grad = on; }
    void zero_grad() { n_->grad = Mat<T>(); }
    Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return n_; }
    explicit operator bool() const { return static_cast<bool>(n_); }
    T item() const {
        LBW_REQUIRE(n_->value.size() == 1, ErrorCode::invalid_argument, "item() on a non-scalar");
        return n_->value.v[0];
    }

private:
    std::shared_ptr<Node<T>> n_;
};

template <class T>
Var<T> constant(Mat<T> m) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(m);
    return Var<T>(n);
}

template <class T>
Var<T> parameter(Mat<T> m) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(m);
    n->requires_grad = true;
    return Var<T>(n);
}

/// Same value, cut from the graph.
template <class T>
Var<T> detach(const Var<T>& x) {
    return constant(x.value());
}

namespace detail {

template <class T, class Fn>
Var<T> make_op(Mat<T> value, std::vector<Var<T>> inputs, Fn&& backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& in : inputs) n->requires_grad |= in.requires_grad();
    if (n->requires_grad) {
        for (const auto& in : inputs) n->parents.push_back(in.ptr());
        n->backward = std::forward<Fn>(backward);
    }
    return Var<T>(n);
}

template <class T>
bool wants(const Var<T>& v) {
    return v.requires_grad();
}

}  // namespace detail

/// Reverse pass from a scalar. Leaves accumulate into grad().
template <class T>
void backward(const Var<T>& loss) {
    LBW_REQUIRE(loss.value().size() == 1, ErrorCode::invalid_argument, "backward() needs a scalar loss");
    if (!loss.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer().v[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
    // interior grads are scratch; free them so repeated passes stay independent
    for (Node<T>* n : order)
        if (n->backward) n->grad = Mat<T>();
}

// --- elementwise ------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    LBW_REQUIRE(a.value().same_shape(b.value()), ErrorCode::invalid_argument, "add: shape mismatch");
    Mat<T> out = a.value();
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.value().v[i];
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<T>(std::move(out), {a, b}, [pa, pb](Node<T>& n) {
        for (auto* p : {pa.get(), pb.get()})
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    LBW_REQUIRE(a.value().same_shape(b.value()), ErrorCode::invalid_argument, "sub: shape mismatch");
    Mat<T> out = a.value();
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.value().v[i];
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<T>(std::move(out), {a, b}, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] -= n.grad.v[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    LBW_REQUIRE(a.value().same_shape(b.value()), ErrorCode::invalid_argument, "mul: shape mismatch");
    Mat<T> out = a.value();
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.value().v[i];
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<T>(std::move(out), {a, b}, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * pb->value.v[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * pa->value.v[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Mat<T> out = a.value();
    for (auto& x : out.v) x *= s;
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa, s](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] * s;
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Mat<T> out = a.value();
    for (auto& x : out.v) x += s;
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
    });
}

/// a (n x c) + row vector b (1 x c) broadcast down the rows.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& b) {
    LBW_REQUIRE(b.rows() == 1 && b.cols() == a.cols(), ErrorCode::invalid_argument, "add_row: shape mismatch");
    Mat<T> out = a.value();
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += b.value().v[c];
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<T>(std::move(out), {a, b}, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (int r = 0; r < n.grad.rows; ++r)
                for (int c = 0; c < n.grad.cols; ++c) g.v[c] += n.grad(r, c);
        }
    });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    Mat<T> out = a.value();
    for (auto& x : out.v) x = x / (T(1) + std::exp(-x));
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < g.v.size(); ++i) {
            const T x = pa->value.v[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            g.v[i] += n.grad.v[i] * (s + x * s * (T(1) - s));
        }
    });
}

/// log(1 + e^x), overflow-safe.
template <class T>
T softplus_value(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
Var<T> softplus(const Var<T>& a) {
    Mat<T> out = a.value();
    for (auto& x : out.v) x = softplus_value(x);
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += n.grad.v[i] / (T(1) + std::exp(-pa->value.v[i]));
    });
}

// --- reductions -------------------------------------------------------------

template <class T>
Var<T> sum_all(const Var<T>& a) {
    T s = 0;
    for (T x : a.value().v) s += x;
    auto pa = a.ptr();
    return detail::make_op<T>(Mat<T>(1, 1, s), {a}, [pa](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (auto& x : g.v) x += n.grad.v[0];
    });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum of squares.
template <class T>
Var<T> sum_sq(const Var<T>& a) {
    T s = 0;
    for (T x : a.value().v) s += x * x;
    auto pa = a.ptr();
    return detail::make_op<T>(Mat<T>(1, 1, s), {a}, [pa](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += T(2) * pa->value.v[i] * n.grad.v[0];
    });
}

template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
    return scale(sum_sq(sub(a, b)), T(1) / static_cast<T>(a.value().size()));
}

/// Column means: n x c -> 1 x c.
template <class T>
Var<T> mean_rows(const Var<T>& a) {
    Mat<T> out(1, a.cols());
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) out.v[c] += a.value()(r, c);
    const T inv = T(1) / static_cast<T>(a.rows());
    for (auto& x : out.v) x *= inv;
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa, inv](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) g(r, c) += n.grad.v[c] * inv;
    });
}

/// Mean cross-entropy of row-wise softmax against integer targets.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
    LBW_REQUIRE(static_cast<int>(targets.size()) == logits.rows(), ErrorCode::invalid_argument,
                "cross_entropy: one target per row");
    const int n = logits.rows(), k = logits.cols();
    Mat<T> prob(n, k);
    T loss = 0;
    for (int r = 0; r < n; ++r) {
        LBW_REQUIRE(targets[r] >= 0 && targets[r] < k, ErrorCode::invalid_argument, "cross_entropy: target out of range");
        const T* l = logits.value().row(r);
        const T m = *std::max_element(l, l + k);
        T z = 0;
        for (int c = 0; c < k; ++c) z += std::exp(l[c] - m);
        for (int c = 0; c < k; ++c) prob(r, c) = std::exp(l[c] - m) / z;
        loss += -(l[targets[r]] - m - std::log(z));
    }
    loss /= static_cast<T>(n);
    auto pl = logits.ptr();
    return detail::make_op<T>(Mat<T>(1, 1, loss), {logits}, [pl, prob, targets, n](Node<T>& node) {
        auto& g = pl->grad_buffer();
        const T s = node.grad.v[0] / static_cast<T>(n);
        for (int r = 0; r < prob.rows; ++r)
            for (int c = 0; c < prob.cols; ++c) g(r, c) += s * (prob(r, c) - (c == targets[r] ? T(1) : T(0)));
    });
}

// --- linear algebra and layout ----------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    LBW_REQUIRE(a.cols() == b.rows(), ErrorCode::invalid_argument, "matmul: inner dimension mismatch");
    const int n = a.rows(), k = a.cols(), m = b.cols();
    Mat<T> out(n, m);
    kernel::gemm_nn(a.value().v.data(), b.value().v.data(), out.v.data(), n, k, m);
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<T>(std::move(out), {a, b}, [pa, pb, n, k, m](Node<T>& node) {
        if (pa->requires_grad)
            kernel::gemm_nt(node.grad.v.data(), pb->value.v.data(), pa->grad_buffer().v.data(), n, m, k);
        if (pb->requires_grad)
            kernel::gemm_tn(pa->value.v.data(), node.grad.v.data(), pb->grad_buffer().v.data(), n, k, m);
    });
}

/// x W (+ b). W: in x out, b: 1 x out or empty.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
    Var<T> y = matmul(x, w);
    return b ? add_row(y, b) : y;
}

/// out[i] = a[idx[i]].
template <class T>
Var<T> gather_rows(const Var<T>& a, const std::vector<int>& idx) {
    const int c = a.cols();
    Mat<T> out(static_cast<int>(idx.size()), c);
    for (size_t i = 0; i < idx.size(); ++i) {
        LBW_REQUIRE(idx[i] >= 0 && idx[i] < a.rows(), ErrorCode::invalid_argument, "gather_rows: index out of range");
        std::copy_n(a.value().row(idx[i]), c, out.row(static_cast<int>(i)));
    }
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa, idx, c](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (size_t i = 0; i < idx.size(); ++i) {
            const T* src = n.grad.row(static_cast<int>(i));
            T* dst = g.row(idx[i]);
            for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, int begin, int end) {
    LBW_REQUIRE(0 <= begin && begin <= end && end <= a.rows(), ErrorCode::invalid_argument, "slice_rows: bad range");
    const int c = a.cols();
    Mat<T> out(end - begin, c);
    std::copy(a.value().row(begin), a.value().row(begin) + static_cast<size_t>(end - begin) * c, out.v.begin());
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa, begin, c](Node<T>& n) {
        auto& g = pa->grad_buffer();
        T* dst = g.row(begin);
        for (size_t i = 0; i < n.grad.v.size(); ++i) dst[i] += n.grad.v[i];
        (void)c;
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, int begin, int end) {
    LBW_REQUIRE(0 <= begin && begin <= end && end <= a.cols(), ErrorCode::invalid_argument, "slice_cols: bad range");
    const int w = end - begin;
    Mat<T> out(a.rows(), w);
    for (int r = 0; r < a.rows(); ++r) std::copy_n(a.value().row(r) + begin, w, out.row(r));
    auto pa = a.ptr();
    return detail::make_op<T>(std::move(out), {a}, [pa, begin, w](Node<T>& n) {
        auto& g = pa->grad_buffer();
        for (int r = 0; r < g.rows; ++r)
            for (int j = 0; j < w; ++j) g(r, begin + j) += n.grad(r, j);
    });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    LBW_REQUIRE(!parts.empty(), ErrorCode::invalid_argument, "concat_rows: nothing to concatenate");
    const int c = parts[0].cols();
    int rows = 0;
    for (const auto& p : parts) {
        LBW_REQUIRE(p.cols() == c, ErrorCode::invalid_argument, "concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat<T> out(rows, c);
    auto it = out.v.begin();
    for (const auto& p : parts) it = std::copy(p.value().v.begin(), p.value().v.end(), it);
    std::vector<std::shared_ptr<Node<T>>> ptrs;
    for (const auto& p : parts) ptrs.push_back(p.ptr());
    return detail::make_op<T>(std::move(out), parts, [ptrs](Node<T>& n) {
        size_t off = 0;
        for (const auto& p : ptrs) {
            const size_t sz = p->value.v.size();
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (size_t i = 0; i < sz; ++i) g.v[i] += n.grad.v[off + i];
            }
            off += sz;
        }
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    LBW_REQUIRE(!parts.empty(), ErrorCode::invalid_argument, "concat_cols: nothing to concatenate");
    const int r = parts[0].rows();
    int cols = 0;
    for (const auto& p : parts) {
        LBW_REQUIRE(p.rows() == r, ErrorCode::invalid_argument, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat<T> out(r, cols);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < r; ++i) std::copy_n(p.value().row(i), p.cols(), out.row(i) + off);
        off += p.cols();
    }
    std::vector<std::shared_ptr<Node<T>>> ptrs;
    for (const auto& p : parts) ptrs.push_back(p.ptr());
    return detail::make_op<T>(std::move(out), parts, [ptrs](Node<T>& n) {
        int off = 0;
        for (const auto& p : ptrs) {
            const int w = p->value.cols;
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < w; ++j) g(i, j) += n.grad(i, off + j);
            }
            off += w;
        }
    });
}

/// Row-wise normalization to zero mean and unit variance, no affine.
template <class T>
Var<T> layer_norm(const Var<T>& a, T eps = T(1e-5)) {
    const int n = a.rows(), c = a.cols();
    Mat<T> out(n, c);
    std::vector<T> inv_std(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
        const T* x = a.value().row(r);
        T mu = 0;
        for (int j = 0; j < c; ++j) mu += x[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int j = 0; j < c; ++j) out(r, j) = (x[j] - mu) * is;
    }
    auto pa = a.ptr();
    Mat<T> y = out;
    return detail::make_op<T>(std::move(out), {a}, [pa, y = std::move(y), inv_std, n, c](Node<T>& node) {
        auto& g = pa->grad_buffer();
        for (int r = 0; r < n; ++r) {
            const T* dy = node.grad.row(r);
            const T* yr = y.row(r);
            T mdy = 0, mdyy = 0;
            for (int j = 0; j < c; ++j) mdy += dy[j], mdyy += dy[j] * yr[j];
            mdy /= static_cast<T>(c);
            mdyy /= static_cast<T>(c);
            T* gx = g.row(r);
            for (int j = 0; j < c; ++j) gx[j] += inv_std[static_cast<size_t>(r)] * (dy[j] - mdy - yr[j] * mdyy);
        }
    });
}

// --- attention --------------------------------------------------------------

/// Group-based attention mask. Query i may attend key j according to the
/// relation between their group ids (chunk indices for self-attention, prompt
/// groups for cross-attention).
struct AttnMask {
    enum class Kind : std::uint8_t { full, causal, same, table };
    Kind kind = Kind::full;
    std::vector<int> q_group, k_group;
    int table_cols = 0;
    std::vector<std::uint8_t> table;  // q_group x k_group, for Kind::table

    bool allowed(int i, int j) const {
        switch (kind) {
        case Kind::full: return true;
        case Kind::causal: return k_group[static_cast<size_t>(j)] <= q_group[static_cast<size_t>(i)];
        case Kind::same: return k_group[static_cast<size_t>(j)] == q_group[static_cast<size_t>(i)];
        case Kind::table:
            return table[static_cast<size_t>(q_group[static_cast<size_t>(i)]) * table_cols + k_group[static_cast<size_t>(j)]] != 0;
        }
        return false;
    }

    /// Half-open key range that can be allowed for query i (keys sorted by group).
    void check(int nq, int nk) const {
        if (kind == Kind::full) return;
        LBW_REQUIRE(static_cast<int>(q_group.size()) == nq && static_cast<int>(k_group.size()) == nk,
                    ErrorCode::contract_violation, "attention mask does not match the token counts");
    }
};

inline AttnMask full_mask() { return {}; }

/// Block-causal mask over `chunks` chunks of `chunk_tokens` tokens each.
inline AttnMask build_block_causal_mask(int chunks, int chunk_tokens) {
    LBW_REQUIRE(chunks >= 1 && chunk_tokens >= 1, ErrorCode::invalid_argument, "mask needs at least one chunk");
    AttnMask m;
    m.kind = AttnMask::Kind::causal;
    for (int c = 0; c < chunks; ++c)
        for (int t = 0; t < chunk_tokens; ++t) m.q_group.push_back(c);
    m.k_group = m.q_group;
    return m;
}

/// Multi-head scaled dot-product attention. q: nq x (h*d), k, v: nk x (h*d).
/// Rows with no allowed key produce zero output.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const AttnMask& mask) {
    const int nq = q.rows(), nk = k.rows(), width = q.cols();
    LBW_REQUIRE(k.cols() == width && v.cols() == width && v.rows() == nk, ErrorCode::invalid_argument,
                "attention: q/k/v shapes do not conform");
    LBW_REQUIRE(heads >= 1 && width % heads == 0, ErrorCode::invalid_argument, "attention: width not divisible by heads");
    mask.check(nq, nk);
    const int d = width / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(d));
    // allowed pattern, shared by every head
    std::vector<std::uint8_t> allow(static_cast<size_t>(nq) * nk, 1);
    if (mask.kind != AttnMask::Kind::full)
        for (int i = 0; i < nq; ++i)
            for (int j = 0; j < nk; ++j) allow[static_cast<size_t>(i) * nk + j] = mask.allowed(i, j);

    Mat<T> out(nq, width);
    const bool need = q.requires_grad() || k.requires_grad() || v.requires_grad();
    std::vector<T> probs(need ? static_cast<size_t>(heads) * nq * nk : static_cast<size_t>(nk));
    const Mat<T>& Q = q.value();
    const Mat<T>& K = k.value();
    const Mat<T>& V = v.value();
    for (int h = 0; h < heads; ++h) {
        const int off = h * d;
        for (int i = 0; i < nq; ++i) {
            T* p = need ? probs.data() + (static_cast<size_t>(h) * nq + i) * nk : probs.data();
            const std::uint8_t* al = allow.data() + static_cast<size_t>(i) * nk;
            const T* qi = Q.row(i) + off;
            T m = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < nk; ++j) {
                if (!al[j]) {
                    p[j] = 0;
                    continue;
                }
                const T* kj = K.row(j) + off;
                T s = 0;
                for (int e = 0; e < d; ++e) s += qi[e] * kj[e];
                p[j] = s * sc;
                m = std::max(m, p[j]);
            }
            if (m == -std::numeric_limits<T>::infinity()) {
                std::fill(p, p + nk, T(0));
                continue;
            }
            T z = 0;
            for (int j = 0; j < nk; ++j)
                if (al[j]) z += (p[j] = std::exp(p[j] - m));
            const T iz = T(1) / z;
            T* oi = out.row(i) + off;
            for (int j = 0; j < nk; ++j) {
                if (!al[j]) continue;
                p[j] *= iz;
                const T* vj = V.row(j) + off;
                for (int e = 0; e < d; ++e) oi[e] += p[j] * vj[e];
            }
        }
    }
    if (!need) return constant(std::move(out));
    auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
    return detail::make_op<T>(std::move(out), {q, k, v},
                              [pq, pk, pv, probs = std::move(probs), heads, nq, nk, d, sc](Node<T>& node) {
        const Mat<T>& dO = node.grad;
        const Mat<T>& Q = pq->value;
        const Mat<T>& K = pk->value;
        const Mat<T>& V = pv->value;
        Mat<T>* gq = pq->requires_grad ? &pq->grad_buffer() : nullptr;
        Mat<T>* gk = pk->requires_grad ? &pk->grad_buffer() : nullptr;
        Mat<T>* gv = pv->requires_grad ? &pv->grad_buffer() : nullptr;
        std::vector<T> dp(static_cast<size_t>(nk));
        for (int h = 0; h < heads; ++h) {
            const int off = h * d;
            for (int i = 0; i < nq; ++i) {
                const T* p = probs.data() + (static_cast<size_t>(h) * nq + i) * nk;
                const T* doi = dO.row(i) + off;
                T dot = 0;
                for (int j = 0; j < nk; ++j) {
                    if (p[j] == T(0)) {
                        dp[static_cast<size_t>(j)] = 0;
                        continue;
                    }
                    const T* vj = V.row(j) + off;
                    T s = 0;
                    for (int e = 0; e < d; ++e) s += doi[e] * vj[e];
                    dp[static_cast<size_t>(j)] = s;
                    dot += s * p[j];
                    if (gv) {
                        T* gvj = gv->row(j) + off;
                        for (int e = 0; e < d; ++e) gvj[e] += p[j] * doi[e];
                    }
                }
                for (int j = 0; j < nk; ++j) {
                    if (p[j] == T(0)) continue;
                    const T ds = p[j] * (dp[static_cast<size_t>(j)] - dot) * sc;
                    if (gq) {
                        T* gqi = gq->row(i) + off;
                        const T* kj = K.row(j) + off;
                        for (int e = 0; e < d; ++e) gqi[e] += ds * kj[e];
                    }
                    if (gk) {
                        T* gkj = gk->row(j) + off;
                        const T* qi = Q.row(i) + off;
                        for (int e = 0; e < d; ++e) gkj[e] += ds * qi[e];
                    }
                }
            }
        }
    });
}

/// Dense reference: explicit softmax over every allowed key, no fusion.
template <class T>
Mat<T> attention_reference(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads, const AttnMask& mask) {
    const int nq = q.rows, nk = k.rows, d = q.cols / heads;
    Mat<T> out(nq, q.cols);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < nq; ++i) {
            std::vector<T> s;
            std::vector<int> keys;
            for (int j = 0; j < nk; ++j) {
                if (!mask.allowed(i, j)) continue;
                T dot = 0;
                for (int e = 0; e < d; ++e) dot += q(i, h * d + e) * k(j, h * d + e);
                s.push_back(dot / std::sqrt(static_cast<T>(d)));
                keys.push_back(j);
            }
            if (keys.empty()) continue;
            T z = 0;
            for (T x : s) z += std::exp(x);
            for (size_t a = 0; a < keys.size(); ++a)
                for (int e = 0; e < d; ++e) out(i, h * d + e) += std::exp(s[a]) / z * v(keys[a], h * d + e);
        }
    return out;
}

}  // namespace lbw
