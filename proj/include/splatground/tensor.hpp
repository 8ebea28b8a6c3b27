#pragma once

// Dense-tensor container with tape-based reverse-mode autodiff.
//
// Design notes:
//  - Templated on the scalar type: float for training, double for gradient
//    verification. The two instantiations share all op code.
//  - Define-by-run: every op allocates a Node holding values, parent links
//    and an adjoint closure. Creation order (a global atomic sequence) is a
//    valid topological order, so backward() just walks ids downward.
//  - Tensors shared across graph-building threads must be leaves (parameters
//    or constants); non-leaf nodes are confined to the thread that built them.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "splatground/rng.hpp"

namespace sg {

using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        r += std::to_string(s[i]);
        if (i + 1 < s.size()) r += ",";
    }
    return r + "]";
}

inline void op_check(bool cond, const std::string& op, const std::string& msg) {
    if (!cond) throw Error(op + ": " + msg);
}

namespace detail {
inline std::atomic<uint64_t>& seq_counter() {
    static std::atomic<uint64_t> c{1};
    return c;
}
inline thread_local bool grad_enabled = true;
} // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev; }
};

inline bool grad_mode() { return detail::grad_enabled; }

template <class T>
struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad; // sized on first accumulation
    bool requires_grad = false;
    bool leaf = true;
    uint64_t seq = 0;
    std::string name;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(val.size()); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<T> values) {
        auto n = std::make_shared<Node<T>>();
        op_check(shape_numel(shape) == static_cast<int64_t>(values.size()), "Tensor::from",
                 "value count " + std::to_string(values.size()) + " != numel of " + shape_str(shape));
        n->shape = std::move(shape);
        n->val = std::move(values);
        n->seq = detail::seq_counter().fetch_add(1, std::memory_order_relaxed);
        return Tensor(std::move(n));
    }
    static Tensor zeros(Shape shape) {
        auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)));
    }
    static Tensor full(Shape shape, T v) {
        auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(static_cast<size_t>(n), v));
    }
    static Tensor scalar(T v) { return from({1}, {v}); }
    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
        return from(std::move(shape), std::move(v));
    }
    static Tensor rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
        std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
        return from(std::move(shape), std::move(v));
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return n_->numel(); }

    const std::vector<T>& values() const { return n_->val; }
    // In-place mutation is reserved for leaves (optimizer updates).
    std::vector<T>& values_mut() {
        op_check(n_->leaf, "Tensor::values_mut", "in-place mutation of a non-leaf tensor");
        return n_->val;
    }
    T item() const {
        op_check(numel() == 1, "Tensor::item", "tensor has " + std::to_string(numel()) + " elements");
        return n_->val[0];
    }
    T at(std::initializer_list<int64_t> idx) const {
        int64_t flat = 0;
        size_t k = 0;
        for (int64_t i : idx) flat = flat * n_->shape[k] + i, ++k;
        return n_->val[static_cast<size_t>(flat)];
    }

    Tensor& set_requires_grad(bool b = true) {
        op_check(n_->leaf, "set_requires_grad", "only leaves can be marked as parameters");
        n_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_name(std::string name) {
        n_->name = std::move(name);
        return *this;
    }
    const std::string& name() const { return n_->name; }

    const std::vector<T>& grad() const {
        op_check(n_->grad.size() == n_->val.size(), "Tensor::grad",
                 "no gradient present for '" + n_->name + "' (run backward first)");
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->val.size(); }
    void zero_grad() { n_->grad.assign(n_->val.size(), T(0)); }

    Tensor detach() const {
        auto t = from(n_->shape, n_->val);
        return t;
    }

    void backward() { backward_seed(std::vector<T>(n_->val.size(), T(1))); }
    void backward(const Tensor& seed) {
        op_check(seed.shape() == shape(), "backward", "seed shape " + shape_str(seed.shape()) +
                                                          " != output shape " + shape_str(shape()));
        backward_seed(seed.values());
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

private:
    void backward_seed(const std::vector<T>& seed) {
        op_check(n_ != nullptr, "backward", "undefined tensor");
        op_check(n_->requires_grad, "backward", "output has no recorded gradient path");
        // Collect reachable grad-requiring nodes.
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<Node<T>*> stack{n_.get()};
        seen.insert(n_.get());
        while (!stack.empty()) {
            Node<T>* cur = stack.back();
            stack.pop_back();
            order.push_back(cur);
            for (auto& p : cur->parents) {
                if (p->requires_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
        n_->ensure_grad();
        for (size_t i = 0; i < seed.size(); ++i) n_->grad[i] += seed[i];
        for (Node<T>* nd : order) {
            if (nd->backprop) nd->backprop(*nd);
        }
    }

    std::shared_ptr<Node<T>> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// op plumbing helpers
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
std::shared_ptr<Node<T>> make_result(Shape shape, std::vector<T> val,
                                     std::vector<std::shared_ptr<Node<T>>> parents,
                                     std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    n->seq = seq_counter().fetch_add(1, std::memory_order_relaxed);
    bool need = false;
    if (grad_enabled) {
        for (auto& p : parents)
            if (p->requires_grad) need = true;
    }
    if (need) {
        n->requires_grad = true;
        n->leaf = false;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

template <class T>
void accumulate(Node<T>& dst, const std::vector<T>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

// numpy-style broadcast of b onto a result shape
inline Shape broadcast_shape(const Shape& a, const Shape& b, const std::string& op) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        op_check(da == db || da == 1 || db == 1, op,
                 "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
        out[i] = std::max(da, db);
    }
    return out;
}

// strides of `in` viewed in the broadcast frame `out` (0 where broadcast)
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(in.size()) - 1, j = static_cast<int>(out.size()) - 1; i >= 0;
         --i, --j) {
        st[static_cast<size_t>(j)] = (in[static_cast<size_t>(i)] == 1) ? 0 : stride;
        stride *= in[static_cast<size_t>(i)];
    }
    return st;
}

// Reduce a gradient in the broadcast frame back onto `in`'s shape.
template <class T>
std::vector<T> reduce_to_shape(const std::vector<T>& g, const Shape& out, const Shape& in) {
    std::vector<T> r(static_cast<size_t>(shape_numel(in)), T(0));
    auto st = broadcast_strides(in, out);
    std::vector<int64_t> idx(out.size(), 0);
    int64_t n = shape_numel(out);
    int64_t off = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        r[static_cast<size_t>(off)] += g[static_cast<size_t>(flat)];
        for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
            auto ud = static_cast<size_t>(d);
            idx[ud]++;
            off += st[ud];
            if (idx[ud] < out[ud]) break;
            off -= st[ud] * out[ud];
            idx[ud] = 0;
        }
    }
    return r;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class FwdFn, class BwdFn>
Tensor<T> binary_op(const char* opname, const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd,
                    BwdFn bwd) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), opname);
    const int64_t n = shape_numel(out_shape);
    std::vector<T> out(static_cast<size_t>(n));
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i)
            out[i] = fwd(av[static_cast<size_t>(i)], bv[static_cast<size_t>(i)]);
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        std::vector<int64_t> idx(out_shape.size(), 0);
        int64_t oa = 0, ob = 0;
        for (int64_t flat = 0; flat < n; ++flat) {
            out[static_cast<size_t>(flat)] =
                fwd(av[static_cast<size_t>(oa)], bv[static_cast<size_t>(ob)]);
            for (int d = static_cast<int>(out_shape.size()) - 1; d >= 0; --d) {
                auto ud = static_cast<size_t>(d);
                idx[ud]++;
                oa += sa[ud];
                ob += sb[ud];
                if (idx[ud] < out_shape[ud]) break;
                oa -= sa[ud] * out_shape[ud];
                ob -= sb[ud] * out_shape[ud];
                idx[ud] = 0;
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = make_result<T>(
        out_shape, std::move(out), {an, bn}, [an, bn, out_shape, bwd](Node<T>& self) {
            const int64_t n = shape_numel(out_shape);
            std::vector<T> ga(an->requires_grad ? static_cast<size_t>(n) : 0);
            std::vector<T> gb(bn->requires_grad ? static_cast<size_t>(n) : 0);
            auto sa = broadcast_strides(an->shape, out_shape);
            auto sb = broadcast_strides(bn->shape, out_shape);
            std::vector<int64_t> idx(out_shape.size(), 0);
            int64_t oa = 0, ob = 0;
            for (int64_t flat = 0; flat < n; ++flat) {
                T da = 0, db = 0;
                bwd(an->val[static_cast<size_t>(oa)], bn->val[static_cast<size_t>(ob)],
                    self.val[static_cast<size_t>(flat)], self.grad[static_cast<size_t>(flat)], da,
                    db);
                if (!ga.empty()) ga[static_cast<size_t>(flat)] = da;
                if (!gb.empty()) gb[static_cast<size_t>(flat)] = db;
                for (int d = static_cast<int>(out_shape.size()) - 1; d >= 0; --d) {
                    auto ud = static_cast<size_t>(d);
                    idx[ud]++;
                    oa += sa[ud];
                    ob += sb[ud];
                    if (idx[ud] < out_shape[ud]) break;
                    oa -= sa[ud] * out_shape[ud];
                    ob -= sb[ud] * out_shape[ud];
                    idx[ud] = 0;
                }
            }
            if (!ga.empty()) {
                auto r = reduce_to_shape(ga, out_shape, an->shape);
                accumulate(*an, r);
            }
            if (!gb.empty()) {
                auto r = reduce_to_shape(gb, out_shape, bn->shape);
                accumulate(*bn, r);
            }
        });
    return Tensor<T>(std::move(node));
}

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_op(const char*, const Tensor<T>& a, FwdFn fwd, BwdFn bwd) {
    const int64_t n = a.numel();
    std::vector<T> out(static_cast<size_t>(n));
    const auto& av = a.values();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(av[static_cast<size_t>(i)]);
    auto an = a.node();
    auto node =
        make_result<T>(a.shape(), std::move(out), {an}, [an, bwd](Node<T>& self) {
            std::vector<T> g(self.val.size());
            for (size_t i = 0; i < g.size(); ++i) g[i] = bwd(an->val[i], self.val[i]) * self.grad[i];
            accumulate(*an, g);
        });
    return Tensor<T>(std::move(node));
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T, T g, T& da, T& db) { da = g, db = g; });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T, T g, T& da, T& db) { da = g, db = -g; });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T, T g, T& da, T& db) { da = g * y, db = g * x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T x, T y, T, T g, T& da, T& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// scalar & unary ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return detail::unary_op<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    return detail::unary_op<T>("mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}
template <class T>
Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }

template <class T>
Tensor<T> exp_op(const Tensor<T>& a) {
    return detail::unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log_op(const Tensor<T>& a) {
    return detail::unary_op<T>("log", a, [](T x) { return std::log(x); },
                               [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
    return detail::unary_op<T>("sqrt", a, [](T x) { return std::sqrt(x); },
                               [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> abs_op(const Tensor<T>& a) {
    return detail::unary_op<T>("abs", a, [](T x) { return std::abs(x); },
                               [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}
template <class T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary_op<T>("sigmoid", a, [](T x) { return sigmoid_scalar(x); },
                               [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> tanh_op(const Tensor<T>& a) {
    return detail::unary_op<T>("tanh", a, [](T x) { return std::tanh(x); },
                               [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    // tanh approximation; smooth everywhere which keeps finite-difference
    // checks clean
    constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return detail::unary_op<T>(
        "gelu", a,
        [](T x) {
            T u = static_cast<T>(kC) * (x + static_cast<T>(kA) * x * x * x);
            return T(0.5) * x * (T(1) + std::tanh(u));
        },
        [](T x, T) {
            T u = static_cast<T>(kC) * (x + static_cast<T>(kA) * x * x * x);
            T t = std::tanh(u);
            T du = static_cast<T>(kC) * (T(1) + T(3) * static_cast<T>(kA) * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
    return detail::unary_op<T>("pow_scalar", a, [p](T x) { return std::pow(x, p); },
                               [p](T x, T) { return p * std::pow(x, p - T(1)); });
}
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary_op<T>(
        "clamp", a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.values()) s += v;
    auto an = a.node();
    auto node = detail::make_result<T>({1}, {s}, {an}, [an](Node<T>& self) {
        std::vector<T> g(an->val.size(), self.grad[0]);
        detail::accumulate(*an, g);
    });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// sum over the last dimension, keepdim ([..., C] -> [..., 1])
template <class T>
Tensor<T> sum_lastdim(const Tensor<T>& a) {
    const int64_t c = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / c;
    std::vector<T> out(static_cast<size_t>(rows), T(0));
    const auto& av = a.values();
    for (int64_t r = 0; r < rows; ++r) {
        T s = 0;
        for (int64_t j = 0; j < c; ++j) s += av[static_cast<size_t>(r * c + j)];
        out[static_cast<size_t>(r)] = s;
    }
    Shape os = a.shape();
    os.back() = 1;
    auto an = a.node();
    auto node = detail::make_result<T>(os, std::move(out), {an}, [an, c, rows](Node<T>& self) {
        std::vector<T> g(an->val.size());
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j)
                g[static_cast<size_t>(r * c + j)] = self.grad[static_cast<size_t>(r)];
        detail::accumulate(*an, g);
    });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// row-structured ops (last dimension)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    const int64_t c = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / c;
    std::vector<T> out(a.values().size());
    const auto& av = a.values();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = &av[static_cast<size_t>(r * c)];
        T* y = &out[static_cast<size_t>(r * c)];
        T mx = x[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T s = 0;
        for (int64_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (int64_t j = 0; j < c; ++j) y[j] /= s;
    }
    auto an = a.node();
    auto node =
        detail::make_result<T>(a.shape(), std::move(out), {an}, [an, c, rows](Node<T>& self) {
            std::vector<T> g(an->val.size());
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = &self.val[static_cast<size_t>(r * c)];
                const T* gy = &self.grad[static_cast<size_t>(r * c)];
                T dot = 0;
                for (int64_t j = 0; j < c; ++j) dot += gy[j] * y[j];
                for (int64_t j = 0; j < c; ++j)
                    g[static_cast<size_t>(r * c + j)] = (gy[j] - dot) * y[j];
            }
            detail::accumulate(*an, g);
        });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& a) {
    const int64_t c = a.dim(a.rank() - 1);
    const int64_t rows = a.numel() / c;
    std::vector<T> out(a.values().size());
    const auto& av = a.values();
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = &av[static_cast<size_t>(r * c)];
        T* y = &out[static_cast<size_t>(r * c)];
        T mx = x[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        T s = 0;
        for (int64_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
        T lse = mx + std::log(s);
        for (int64_t j = 0; j < c; ++j) y[j] = x[j] - lse;
    }
    auto an = a.node();
    auto node =
        detail::make_result<T>(a.shape(), std::move(out), {an}, [an, c, rows](Node<T>& self) {
            std::vector<T> g(an->val.size());
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = &self.val[static_cast<size_t>(r * c)];
                const T* gy = &self.grad[static_cast<size_t>(r * c)];
                T gs = 0;
                for (int64_t j = 0; j < c; ++j) gs += gy[j];
                for (int64_t j = 0; j < c; ++j)
                    g[static_cast<size_t>(r * c + j)] = gy[j] - std::exp(y[j]) * gs;
            }
            detail::accumulate(*an, g);
        });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps = T(1e-5)) {
    const int64_t c = x.dim(x.rank() - 1);
    op_check(gamma.numel() == c && beta.numel() == c, "layer_norm",
             "gamma/beta must have " + std::to_string(c) + " elements");
    const int64_t rows = x.numel() / c;
    std::vector<T> out(x.values().size());
    std::vector<T> xhat(x.values().size());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = &xv[static_cast<size_t>(r * c)];
        T mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += p[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (int64_t j = 0; j < c; ++j) var += (p[j] - mu) * (p[j] - mu);
        var /= static_cast<T>(c);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int64_t j = 0; j < c; ++j) {
            T xh = (p[j] - mu) * is;
            xhat[static_cast<size_t>(r * c + j)] = xh;
            out[static_cast<size_t>(r * c + j)] = xh * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto node = detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            std::vector<T> gx(xn->requires_grad ? xn->val.size() : 0);
            std::vector<T> gg(static_cast<size_t>(c), T(0));
            std::vector<T> gb(static_cast<size_t>(c), T(0));
            for (int64_t r = 0; r < rows; ++r) {
                const T* gy = &self.grad[static_cast<size_t>(r * c)];
                const T* xh = &xhat[static_cast<size_t>(r * c)];
                T m1 = 0, m2 = 0;
                for (int64_t j = 0; j < c; ++j) {
                    T dyh = gy[j] * gn->val[static_cast<size_t>(j)];
                    m1 += dyh;
                    m2 += dyh * xh[j];
                    gg[static_cast<size_t>(j)] += gy[j] * xh[j];
                    gb[static_cast<size_t>(j)] += gy[j];
                }
                m1 /= static_cast<T>(c);
                m2 /= static_cast<T>(c);
                if (!gx.empty()) {
                    T is = inv_std[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < c; ++j) {
                        T dyh = gy[j] * gn->val[static_cast<size_t>(j)];
                        gx[static_cast<size_t>(r * c + j)] = is * (dyh - m1 - xh[j] * m2);
                    }
                }
            }
            if (!gx.empty()) detail::accumulate(*xn, gx);
            if (gn->requires_grad) detail::accumulate(*gn, gg);
            if (bn->requires_grad) detail::accumulate(*bn, gb);
        });
    return Tensor<T>(std::move(node));
}

// x / ||x||_2 per row with an epsilon guard
template <class T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps = T(1e-12)) {
    auto sq = mul(x, x);
    auto n = sqrt_op(add_scalar(sum_lastdim(sq), eps));
    return div(x, n);
}

// ---------------------------------------------------------------------------
// linear algebra / layout ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    op_check(a.rank() == 2 && b.rank() == 2, "matmul", "expects rank-2 operands");
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    op_check(k == k2, "matmul",
             "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(static_cast<size_t>(m * n), T(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
            T s = av[static_cast<size_t>(i * k + kk)];
            if (s == T(0)) continue;
            const T* brow = &bv[static_cast<size_t>(kk * n)];
            T* orow = &out[static_cast<size_t>(i * n)];
            for (int64_t j = 0; j < n; ++j) orow[j] += s * brow[j];
        }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_result<T>(
        {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
            if (an->requires_grad) {
                // dA[i,kk] = <grad row i, B row kk>, both contiguous
                std::vector<T> ga(static_cast<size_t>(m * k), T(0));
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = &self.grad[static_cast<size_t>(i * n)];
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const T* brow = &bn->val[static_cast<size_t>(kk * n)];
                        T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                        int64_t j = 0;
                        for (; j + 4 <= n; j += 4) {
                            a0 += grow[j] * brow[j];
                            a1 += grow[j + 1] * brow[j + 1];
                            a2 += grow[j + 2] * brow[j + 2];
                            a3 += grow[j + 3] * brow[j + 3];
                        }
                        for (; j < n; ++j) a0 += grow[j] * brow[j];
                        ga[static_cast<size_t>(i * k + kk)] = (a0 + a1) + (a2 + a3);
                    }
                }
                detail::accumulate(*an, ga);
            }
            if (bn->requires_grad) {
                std::vector<T> gb(static_cast<size_t>(k * n), T(0));
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        T s = an->val[static_cast<size_t>(i * k + kk)];
                        if (s == T(0)) continue;
                        const T* grow = &self.grad[static_cast<size_t>(i * n)];
                        T* brow = &gb[static_cast<size_t>(kk * n)];
                        for (int64_t j = 0; j < n; ++j) brow[j] += s * grow[j];
                    }
                detail::accumulate(*bn, gb);
            }
        });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    op_check(a.rank() == 2, "transpose2d", "expects rank-2 operand");
    const int64_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.values().size());
    const auto& av = a.values();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
            out[static_cast<size_t>(j * r + i)] = av[static_cast<size_t>(i * c + j)];
    auto an = a.node();
    auto node = detail::make_result<T>({c, r}, std::move(out), {an}, [an, r, c](Node<T>& self) {
        std::vector<T> g(an->val.size());
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                g[static_cast<size_t>(i * c + j)] = self.grad[static_cast<size_t>(j * r + i)];
        detail::accumulate(*an, g);
    });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    op_check(shape_numel(s) == a.numel(), "reshape",
             "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(s));
    auto an = a.node();
    auto node = detail::make_result<T>(std::move(s), a.values(), {an}, [an](Node<T>& self) {
        detail::accumulate(*an, self.grad);
    });
    return Tensor<T>(std::move(node));
}

// slice along the last dimension: [..., C] -> [..., len]
template <class T>
Tensor<T> slice_lastdim(const Tensor<T>& a, int64_t start, int64_t len) {
    const int64_t c = a.dim(a.rank() - 1);
    op_check(start >= 0 && len >= 1 && start + len <= c, "slice_lastdim", "range out of bounds");
    const int64_t rows = a.numel() / c;
    std::vector<T> out(static_cast<size_t>(rows * len));
    const auto& av = a.values();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < len; ++j)
            out[static_cast<size_t>(r * len + j)] = av[static_cast<size_t>(r * c + start + j)];
    Shape os = a.shape();
    os.back() = len;
    auto an = a.node();
    auto node =
        detail::make_result<T>(os, std::move(out), {an}, [an, c, rows, start, len](Node<T>& self) {
            std::vector<T> g(an->val.size(), T(0));
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < len; ++j)
                    g[static_cast<size_t>(r * c + start + j)] =
                        self.grad[static_cast<size_t>(r * len + j)];
            detail::accumulate(*an, g);
        });
    return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
    op_check(!parts.empty(), "concat_lastdim", "empty input list");
    Shape base = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        op_check(p.rank() == static_cast<int>(base.size()), "concat_lastdim", "rank mismatch");
        for (int d = 0; d + 1 < p.rank(); ++d)
            op_check(p.dim(d) == base[static_cast<size_t>(d)], "concat_lastdim", "shape mismatch");
        total += p.dim(p.rank() - 1);
    }
    const int64_t rows = parts[0].numel() / parts[0].dim(parts[0].rank() - 1);
    std::vector<T> out(static_cast<size_t>(rows * total));
    std::vector<int64_t> offs;
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t c = p.dim(p.rank() - 1);
        const auto& pv = p.values();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j)
                out[static_cast<size_t>(r * total + off + j)] = pv[static_cast<size_t>(r * c + j)];
        offs.push_back(off);
        off += c;
    }
    Shape os = base;
    os.back() = total;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    auto node = detail::make_result<T>(
        os, std::move(out), parents, [parents, offs, rows, total](Node<T>& self) {
            for (size_t pi = 0; pi < parents.size(); ++pi) {
                auto& pn = parents[pi];
                if (!pn->requires_grad) continue;
                const int64_t c = pn->shape.back();
                std::vector<T> g(pn->val.size());
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < c; ++j)
                        g[static_cast<size_t>(r * c + j)] =
                            self.grad[static_cast<size_t>(r * total + offs[pi] + j)];
                detail::accumulate(*pn, g);
            }
        });
    return Tensor<T>(std::move(node));
}

// concat along dim 0 (contiguous payload concatenation)
template <class T>
Tensor<T> concat_dim0(const std::vector<Tensor<T>>& parts) {
    op_check(!parts.empty(), "concat_dim0", "empty input list");
    Shape tail = parts[0].shape();
    int64_t d0 = 0;
    for (const auto& p : parts) {
        for (size_t d = 1; d < tail.size(); ++d)
            op_check(p.shape()[d] == tail[d], "concat_dim0", "trailing shape mismatch");
        d0 += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(d0 * (shape_numel(tail) / tail[0])));
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    Shape os = tail;
    os[0] = d0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    auto node = detail::make_result<T>(os, std::move(out), parents, [parents](Node<T>& self) {
        size_t off = 0;
        for (auto& pn : parents) {
            if (pn->requires_grad) {
                std::vector<T> g(self.grad.begin() + static_cast<std::ptrdiff_t>(off),
                                 self.grad.begin() + static_cast<std::ptrdiff_t>(off + pn->val.size()));
                detail::accumulate(*pn, g);
            }
            off += pn->val.size();
        }
    });
    return Tensor<T>(std::move(node));
}

// pick rows of a 2-d tensor by (constant) index list; adjoint scatter-adds
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int64_t> idx) {
    op_check(a.rank() == 2, "gather_rows", "expects rank-2 operand");
    const int64_t r = a.dim(0), c = a.dim(1);
    for (int64_t i : idx) op_check(i >= 0 && i < r, "gather_rows", "row index out of range");
    std::vector<T> out(idx.size() * static_cast<size_t>(c));
    const auto& av = a.values();
    for (size_t k = 0; k < idx.size(); ++k)
        std::copy_n(&av[static_cast<size_t>(idx[k] * c)], c, &out[k * static_cast<size_t>(c)]);
    auto an = a.node();
    Shape os{static_cast<int64_t>(idx.size()), c};
    auto node = detail::make_result<T>(
        std::move(os), std::move(out), {an},
        [an, idx = std::move(idx), c](Node<T>& self) {
            std::vector<T> g(an->val.size(), T(0));
            for (size_t k = 0; k < idx.size(); ++k)
                for (int64_t j = 0; j < c; ++j)
                    g[static_cast<size_t>(idx[k] * c + j)] +=
                        self.grad[k * static_cast<size_t>(c) + static_cast<size_t>(j)];
            detail::accumulate(*an, g);
        });
    return Tensor<T>(std::move(node));
}

// dropout; active only when p > 0. Scales kept activations by 1/(1-p).
template <class T>
Tensor<T> dropout(const Tensor<T>& a, T p, Rng& rng) {
    if (p <= T(0)) return a;
    op_check(p < T(1), "dropout", "p must be < 1");
    std::vector<T> mask(a.values().size());
    const T keep = T(1) - p;
    for (auto& m : mask) m = (rng.uniform() < static_cast<double>(p)) ? T(0) : T(1) / keep;
    auto mt = Tensor<T>::from(a.shape(), std::move(mask));
    return mul(a, mt);
}

// ---------------------------------------------------------------------------
// voxel-grid ops (dense 3D convolution and point<->grid transfer)
// ---------------------------------------------------------------------------

namespace detail {

// Copy the shifted (zero-padded) tap plane of one input channel into a
// contiguous out-shaped buffer.
template <class T>
void conv_extract_tap(const T* icb, int kz, int ky, int kx, int stride, int64_t D, int64_t H,
                      int64_t W, int64_t Do, int64_t Ho, int64_t Wo, T* dst) {
    std::fill_n(dst, Do * Ho * Wo, T(0));
    for (int64_t od = 0; od < Do; ++od) {
        const int64_t z = od * stride + kz - 1;
        if (z < 0 || z >= D) continue;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t y = oh * stride + ky - 1;
            if (y < 0 || y >= H) continue;
            T* drow = dst + (od * Ho + oh) * Wo;
            const T* irow = icb + (z * H + y) * W;
            int64_t ow0 = 0;
            while (ow0 * stride + kx - 1 < 0) ++ow0;
            int64_t ow1 = Wo;
            while (ow1 > ow0 && (ow1 - 1) * stride + kx - 1 >= W) --ow1;
            if (stride == 1) {
                const T* ir = irow + kx - 1;
                for (int64_t ow = ow0; ow < ow1; ++ow) drow[ow] = ir[ow];
            } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) drow[ow] = irow[ow * 2 + kx - 1];
            }
        }
    }
}

// Scatter-add an out-shaped buffer back through the same tap shift.
template <class T>
void conv_scatter_tap(const T* src, int kz, int ky, int kx, int stride, int64_t D, int64_t H,
                      int64_t W, int64_t Do, int64_t Ho, int64_t Wo, T* gicb) {
    for (int64_t od = 0; od < Do; ++od) {
        const int64_t z = od * stride + kz - 1;
        if (z < 0 || z >= D) continue;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t y = oh * stride + ky - 1;
            if (y < 0 || y >= H) continue;
            const T* srow = src + (od * Ho + oh) * Wo;
            T* grow = gicb + (z * H + y) * W;
            int64_t ow0 = 0;
            while (ow0 * stride + kx - 1 < 0) ++ow0;
            int64_t ow1 = Wo;
            while (ow1 > ow0 && (ow1 - 1) * stride + kx - 1 >= W) --ow1;
            if (stride == 1) {
                T* gr = grow + kx - 1;
                for (int64_t ow = ow0; ow < ow1; ++ow) gr[ow] += srow[ow];
            } else {
                for (int64_t ow = ow0; ow < ow1; ++ow) grow[ow * 2 + kx - 1] += srow[ow];
            }
        }
    }
}

} // namespace detail

// 3x3x3 convolution, zero padding 1, stride 1 or 2.
// input [Cin, D, H, W], weight [Cout, Cin, 3, 3, 3], bias [Cout].
template <class T>
Tensor<T> conv3d(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, int stride) {
    op_check(in.rank() == 4, "conv3d", "input must be [C,D,H,W], got " + shape_str(in.shape()));
    op_check(w.rank() == 5 && w.dim(2) == 3 && w.dim(3) == 3 && w.dim(4) == 3, "conv3d",
             "weight must be [Cout,Cin,3,3,3]");
    op_check(stride == 1 || stride == 2, "conv3d", "stride must be 1 or 2");
    const int64_t ci = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    const int64_t co = w.dim(0);
    op_check(w.dim(1) == ci, "conv3d", "weight Cin " + std::to_string(w.dim(1)) +
                                           " != input C " + std::to_string(ci));
    op_check(b.numel() == co, "conv3d", "bias size mismatch");
    const int64_t Do = (D - 1) / stride + 1, Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
    const int64_t vol = Do * Ho * Wo;
    const auto& iv = in.values();
    const auto& wv = w.values();
    const auto& bv = b.values();

    std::vector<T> out(static_cast<size_t>(co * vol));
    for (int64_t c = 0; c < co; ++c)
        std::fill_n(&out[static_cast<size_t>(c * vol)], vol, bv[static_cast<size_t>(c)]);
    {
        std::vector<T> tap(static_cast<size_t>(vol));
        for (int64_t cc = 0; cc < ci; ++cc) {
            const T* icb = &iv[static_cast<size_t>(cc * D * H * W)];
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        detail::conv_extract_tap(icb, kz, ky, kx, stride, D, H, W, Do, Ho, Wo,
                                                 tap.data());
                        for (int64_t c = 0; c < co; ++c) {
                            const T wt =
                                wv[static_cast<size_t>(((c * ci + cc) * 3 + kz) * 9 + ky * 3 + kx)];
                            T* oc = &out[static_cast<size_t>(c * vol)];
                            for (int64_t i = 0; i < vol; ++i) oc[i] += wt * tap[static_cast<size_t>(i)];
                        }
                    }
        }
    }

    auto in_n = in.node();
    auto w_n = w.node();
    auto b_n = b.node();
    auto node = detail::make_result<T>(
        {co, Do, Ho, Wo}, std::move(out), {in_n, w_n, b_n},
        [in_n, w_n, b_n, ci, co, D, H, W, Do, Ho, Wo, vol, stride](Node<T>& self) {
            std::vector<T> gin(in_n->requires_grad ? in_n->val.size() : 0, T(0));
            std::vector<T> gw(w_n->requires_grad ? w_n->val.size() : 0, T(0));
            std::vector<T> gb(b_n->requires_grad ? b_n->val.size() : 0, T(0));
            const auto& iv = in_n->val;
            const auto& wv = w_n->val;
            if (!gb.empty())
                for (int64_t c = 0; c < co; ++c) {
                    const T* gc = &self.grad[static_cast<size_t>(c * vol)];
                    T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                    int64_t i = 0;
                    for (; i + 4 <= vol; i += 4) {
                        a0 += gc[i];
                        a1 += gc[i + 1];
                        a2 += gc[i + 2];
                        a3 += gc[i + 3];
                    }
                    for (; i < vol; ++i) a0 += gc[i];
                    gb[static_cast<size_t>(c)] = (a0 + a1) + (a2 + a3);
                }
            std::vector<T> tap(static_cast<size_t>(vol));
            std::vector<T> acc(static_cast<size_t>(vol));
            for (int64_t cc = 0; cc < ci; ++cc) {
                const T* icb = &iv[static_cast<size_t>(cc * D * H * W)];
                T* gicb = gin.empty() ? nullptr : &gin[static_cast<size_t>(cc * D * H * W)];
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            if (!gw.empty())
                                detail::conv_extract_tap(icb, kz, ky, kx, stride, D, H, W, Do, Ho,
                                                         Wo, tap.data());
                            if (gicb) std::fill(acc.begin(), acc.end(), T(0));
                            for (int64_t c = 0; c < co; ++c) {
                                const size_t widx =
                                    static_cast<size_t>(((c * ci + cc) * 3 + kz) * 9 + ky * 3 + kx);
                                const T* gc = &self.grad[static_cast<size_t>(c * vol)];
                                if (!gw.empty()) {
                                    T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                    int64_t i = 0;
                                    for (; i + 4 <= vol; i += 4) {
                                        a0 += gc[i] * tap[static_cast<size_t>(i)];
                                        a1 += gc[i + 1] * tap[static_cast<size_t>(i + 1)];
                                        a2 += gc[i + 2] * tap[static_cast<size_t>(i + 2)];
                                        a3 += gc[i + 3] * tap[static_cast<size_t>(i + 3)];
                                    }
                                    for (; i < vol; ++i) a0 += gc[i] * tap[static_cast<size_t>(i)];
                                    gw[widx] += (a0 + a1) + (a2 + a3);
                                }
                                if (gicb) {
                                    const T wt = wv[widx];
                                    for (int64_t i = 0; i < vol; ++i)
                                        acc[static_cast<size_t>(i)] += wt * gc[i];
                                }
                            }
                            if (gicb)
                                detail::conv_scatter_tap(acc.data(), kz, ky, kx, stride, D, H, W,
                                                         Do, Ho, Wo, gicb);
                        }
            }
            if (!gin.empty()) detail::accumulate(*in_n, gin);
            if (!gw.empty()) detail::accumulate(*w_n, gw);
            if (!gb.empty()) detail::accumulate(*b_n, gb);
        });
    return Tensor<T>(std::move(node));
}

// nearest-neighbour upsample of [C,D,H,W] to explicit target dims (<= 2x each)
template <class T>
Tensor<T> upsample_nearest3d(const Tensor<T>& in, int64_t Do, int64_t Ho, int64_t Wo) {
    op_check(in.rank() == 4, "upsample_nearest3d", "input must be [C,D,H,W]");
    const int64_t c = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    op_check(Do <= 2 * D && Ho <= 2 * H && Wo <= 2 * W, "upsample_nearest3d", "target too large");
    std::vector<T> out(static_cast<size_t>(c * Do * Ho * Wo));
    const auto& iv = in.values();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t z = 0; z < Do; ++z)
            for (int64_t y = 0; y < Ho; ++y)
                for (int64_t x = 0; x < Wo; ++x) {
                    int64_t iz = std::min(z / 2, D - 1), iy = std::min(y / 2, H - 1),
                            ix = std::min(x / 2, W - 1);
                    out[static_cast<size_t>(((ch * Do + z) * Ho + y) * Wo + x)] =
                        iv[static_cast<size_t>(((ch * D + iz) * H + iy) * W + ix)];
                }
    auto in_n = in.node();
    auto node = detail::make_result<T>(
        {c, Do, Ho, Wo}, std::move(out), {in_n}, [in_n, c, D, H, W, Do, Ho, Wo](Node<T>& self) {
            std::vector<T> g(in_n->val.size(), T(0));
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t z = 0; z < Do; ++z)
                    for (int64_t y = 0; y < Ho; ++y)
                        for (int64_t x = 0; x < Wo; ++x) {
                            int64_t iz = std::min(z / 2, D - 1), iy = std::min(y / 2, H - 1),
                                    ix = std::min(x / 2, W - 1);
                            g[static_cast<size_t>(((ch * D + iz) * H + iy) * W + ix)] +=
                                self.grad[static_cast<size_t>(((ch * Do + z) * Ho + y) * Wo + x)];
                        }
            detail::accumulate(*in_n, g);
        });
    return Tensor<T>(std::move(node));
}

namespace detail {
// Trilinear corner weights for a point in normalized [0,1]^3 coordinates on a
// (D,H,W) grid. Returns up to 8 (flat_index, weight) pairs.
struct TrilinearStencil {
    int64_t idx[8];
    double w[8];
    int n = 0;
};
inline TrilinearStencil trilinear_stencil(double px, double py, double pz, int64_t D, int64_t H,
                                          int64_t W) {
    auto clampd = [](double v) { return std::min(1.0, std::max(0.0, v)); };
    double x = clampd(px) * static_cast<double>(W - 1);
    double y = clampd(py) * static_cast<double>(H - 1);
    double z = clampd(pz) * static_cast<double>(D - 1);
    int64_t x0 = static_cast<int64_t>(std::floor(x)), y0 = static_cast<int64_t>(std::floor(y)),
            z0 = static_cast<int64_t>(std::floor(z));
    x0 = std::min(x0, W - 2 >= 0 ? W - 2 : 0);
    y0 = std::min(y0, H - 2 >= 0 ? H - 2 : 0);
    z0 = std::min(z0, D - 2 >= 0 ? D - 2 : 0);
    double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0),
           fz = z - static_cast<double>(z0);
    TrilinearStencil s;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                int64_t xi = std::min(x0 + dx, W - 1), yi = std::min(y0 + dy, H - 1),
                        zi = std::min(z0 + dz, D - 1);
                double wt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                s.idx[s.n] = (zi * H + yi) * W + xi;
                s.w[s.n] = wt;
                s.n++;
            }
    return s;
}
} // namespace detail

// Scatter per-point features into a dense grid with trilinear weights.
// positions are constants (normalized [0,1]^3); feats is [N, C]; output [C,D,H,W].
// Accumulation order is canonicalized so the result is invariant to point
// permutation, bit for bit.
template <class T>
Tensor<T> voxel_splat(const std::vector<std::array<double, 3>>& positions, const Tensor<T>& feats,
                      int64_t D, int64_t H, int64_t W) {
    op_check(feats.rank() == 2, "voxel_splat", "feats must be [N,C]");
    const int64_t n = feats.dim(0), c = feats.dim(1);
    op_check(static_cast<int64_t>(positions.size()) == n, "voxel_splat",
             "positions/features row mismatch");
    struct Entry {
        int64_t cell;
        int64_t point;
        double weight;
    };
    std::vector<Entry> entries;
    entries.reserve(static_cast<size_t>(n) * 8);
    for (int64_t i = 0; i < n; ++i) {
        auto st = detail::trilinear_stencil(positions[static_cast<size_t>(i)][0],
                                            positions[static_cast<size_t>(i)][1],
                                            positions[static_cast<size_t>(i)][2], D, H, W);
        for (int k = 0; k < st.n; ++k)
            if (st.w[k] != 0.0) entries.push_back({st.idx[k], i, st.w[k]});
    }
    const auto& fv = feats.values();
    std::sort(entries.begin(), entries.end(), [&](const Entry& a, const Entry& b) {
        if (a.cell != b.cell) return a.cell < b.cell;
        const auto& pa = positions[static_cast<size_t>(a.point)];
        const auto& pb = positions[static_cast<size_t>(b.point)];
        if (pa != pb) return pa < pb;
        for (int64_t j = 0; j < c; ++j) {
            T x = fv[static_cast<size_t>(a.point * c + j)], y = fv[static_cast<size_t>(b.point * c + j)];
            if (x != y) return x < y;
        }
        return false;
    });
    std::vector<T> out(static_cast<size_t>(c * D * H * W), T(0));
    for (const auto& e : entries) {
        const T wt = static_cast<T>(e.weight);
        for (int64_t j = 0; j < c; ++j)
            out[static_cast<size_t>(j * D * H * W + e.cell)] +=
                wt * fv[static_cast<size_t>(e.point * c + j)];
    }
    auto fn = feats.node();
    auto node = detail::make_result<T>(
        {c, D, H, W}, std::move(out), {fn}, [fn, positions, n, c, D, H, W](Node<T>& self) {
            std::vector<T> g(fn->val.size(), T(0));
            for (int64_t i = 0; i < n; ++i) {
                auto st = detail::trilinear_stencil(positions[static_cast<size_t>(i)][0],
                                                    positions[static_cast<size_t>(i)][1],
                                                    positions[static_cast<size_t>(i)][2], D, H, W);
                for (int64_t j = 0; j < c; ++j) {
                    T acc = 0;
                    for (int k = 0; k < st.n; ++k)
                        acc += static_cast<T>(st.w[k]) *
                               self.grad[static_cast<size_t>(j * D * H * W + st.idx[k])];
                    g[static_cast<size_t>(i * c + j)] += acc;
                }
            }
            detail::accumulate(*fn, g);
        });
    return Tensor<T>(std::move(node));
}

// Trilinear read of a dense grid at constant point positions: [C,D,H,W] -> [N,C].
template <class T>
Tensor<T> voxel_sample(const Tensor<T>& grid, const std::vector<std::array<double, 3>>& positions) {
    op_check(grid.rank() == 4, "voxel_sample", "grid must be [C,D,H,W]");
    const int64_t c = grid.dim(0), D = grid.dim(1), H = grid.dim(2), W = grid.dim(3);
    const int64_t n = static_cast<int64_t>(positions.size());
    std::vector<T> out(static_cast<size_t>(n * c), T(0));
    const auto& gv = grid.values();
    for (int64_t i = 0; i < n; ++i) {
        auto st = detail::trilinear_stencil(positions[static_cast<size_t>(i)][0],
                                            positions[static_cast<size_t>(i)][1],
                                            positions[static_cast<size_t>(i)][2], D, H, W);
        for (int64_t j = 0; j < c; ++j) {
            T acc = 0;
            for (int k = 0; k < st.n; ++k)
                acc += static_cast<T>(st.w[k]) * gv[static_cast<size_t>(j * D * H * W + st.idx[k])];
            out[static_cast<size_t>(i * c + j)] = acc;
        }
    }
    auto gn = grid.node();
    auto node = detail::make_result<T>(
        {n, c}, std::move(out), {gn}, [gn, positions, n, c, D, H, W](Node<T>& self) {
            std::vector<T> g(gn->val.size(), T(0));
            for (int64_t i = 0; i < n; ++i) {
                auto st = detail::trilinear_stencil(positions[static_cast<size_t>(i)][0],
                                                    positions[static_cast<size_t>(i)][1],
                                                    positions[static_cast<size_t>(i)][2], D, H, W);
                for (int64_t j = 0; j < c; ++j) {
                    T gr = self.grad[static_cast<size_t>(i * c + j)];
                    for (int k = 0; k < st.n; ++k)
                        g[static_cast<size_t>(j * D * H * W + st.idx[k])] += static_cast<T>(st.w[k]) * gr;
                }
            }
            detail::accumulate(*gn, g);
        });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// custom-gradient hook
// ---------------------------------------------------------------------------

// An op with a hand-written adjoint (the rasterizer, image blurs). forward()
// may cache state on the instance; backward() receives the upstream gradient
// and returns one gradient array per input (empty array = no gradient).
template <class T>
struct CustomOp {
    virtual ~CustomOp() = default;
    virtual std::string name() const = 0;
    virtual std::pair<Shape, std::vector<T>> forward(const std::vector<const Node<T>*>& inputs) = 0;
    virtual std::vector<std::vector<T>> backward(const std::vector<T>& grad_out,
                                                 const std::vector<const Node<T>*>& inputs) = 0;
};

template <class T>
Tensor<T> apply_custom(std::shared_ptr<CustomOp<T>> op, const std::vector<Tensor<T>>& inputs) {
    std::vector<const Node<T>*> raw;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& t : inputs) {
        raw.push_back(t.node().get());
        parents.push_back(t.node());
    }
    auto [shape, val] = op->forward(raw);
    auto node = detail::make_result<T>(
        std::move(shape), std::move(val), parents, [op, parents](Node<T>& self) {
            std::vector<const Node<T>*> raw;
            for (const auto& p : parents) raw.push_back(p.get());
            auto grads = op->backward(self.grad, raw);
            op_check(grads.size() == parents.size(), op->name(),
                     "backward returned wrong number of gradients");
            for (size_t i = 0; i < parents.size(); ++i) {
                if (grads[i].empty() || !parents[i]->requires_grad) continue;
                op_check(grads[i].size() == parents[i]->val.size(), op->name(),
                         "gradient size mismatch for input " + std::to_string(i));
                detail::accumulate(*parents[i], grads[i]);
            }
        });
    return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// Central-difference verification of a scalar-valued closure, 64-bit mode.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double gradcheck(const std::function<TensorD(std::vector<TensorD>&)>& f,
                        const std::vector<std::pair<Shape, std::vector<double>>>& inputs,
                        double eps = 1e-5) {
    op_check(eps >= 1e-6 && eps <= 1e-4, "gradcheck", "epsilon must be in [1e-6, 1e-4]");
    std::vector<TensorD> leaves;
    for (const auto& [shape, vals] : inputs)
        leaves.push_back(TensorD::from(shape, vals).set_requires_grad(true));
    TensorD loss = f(leaves);
    op_check(loss.numel() == 1, "gradcheck", "closure must return a scalar");
    if (!std::isfinite(loss.item()))
        throw Error("gradcheck: non-finite forward value " + std::to_string(loss.item()));
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0));

    auto eval_at = [&](size_t which, int64_t coord, double delta) {
        NoGradGuard ng;
        std::vector<TensorD> probe;
        for (size_t i = 0; i < inputs.size(); ++i) {
            auto vals = inputs[i].second;
            if (i == which) vals[static_cast<size_t>(coord)] += delta;
            probe.push_back(TensorD::from(inputs[i].first, vals));
        }
        double v = f(probe).item();
        if (!std::isfinite(v)) throw Error("gradcheck: non-finite forward value during probing");
        return v;
    };

    double max_err = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const int64_t n = shape_numel(inputs[i].first);
        for (int64_t j = 0; j < n; ++j) {
            double fp = eval_at(i, j, eps);
            double fm = eval_at(i, j, -eps);
            double num = (fp - fm) / (2 * eps);
            double ana = analytic[i][static_cast<size_t>(j)];
            double err = std::abs(ana - num) / std::max(1.0, std::abs(ana));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

} // namespace sg
