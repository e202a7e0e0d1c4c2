#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <cblas.h>

#include "rdpm/rng.hpp"

namespace rdpm {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

namespace detail {

// Recycles value/grad buffers between graph constructions. Training allocates
// hundreds of megabytes of short-lived tensors per step; without reuse the
// kernel spends more time zeroing fresh pages than the math costs.
struct BufferPool {
    std::unordered_map<std::size_t, std::vector<std::vector<double>>> free;

    std::vector<double> acquire(std::size_t n) {
        auto it = free.find(n);
        if (it != free.end() && !it->second.empty()) {
            auto v = std::move(it->second.back());
            it->second.pop_back();
            return v;
        }
        return std::vector<double>(n);
    }

    std::vector<double> acquire_zeroed(std::size_t n) {
        auto v = acquire(n);
        std::fill(v.begin(), v.end(), 0.0);
        return v;
    }

    void release(std::vector<double>&& v) {
        if (v.empty()) return;
        auto& bucket = free[v.size()];
        if (bucket.size() < 64) bucket.push_back(std::move(v));
    }
};

inline thread_local BufferPool buffer_pool;

struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // sized on first accumulation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads grad, accumulates into parents
    bool consumed = false;   // a backward pass has already run through this root
    bool pooled = false;     // buffers return to the pool on destruction

    ~Node() {
        if (!pooled) return;
        buffer_pool.release(std::move(data));
        buffer_pool.release(std::move(grad));
    }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            if (pooled)
                grad = buffer_pool.acquire_zeroed(data.size());
            else
                grad.assign(data.size(), 0.0);
        }
    }
};

}  // namespace detail

// Value handle over a shared autodiff node. Contents are immutable after
// construction; only the optimizer mutates parameter data in place between
// steps, and backward() fills grads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data.assign(numel_of(n->shape), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false) {
        if (numel_of(shape) != data.size())
            throw ShapeError("from_data: shape " + shape_str(shape) +
                             " does not match data length " +
                             std::to_string(data.size()));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->data) v = stddev * rng.normal();
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    double value() const {
        if (numel() != 1)
            throw ShapeError("value: tensor " + shape_str(shape()) +
                             " is not scalar");
        return node_->data[0];
    }
    double at(std::size_t i) const { return node_->data.at(i); }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw GraphError("grad: not populated");
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

    // In-place data mutation; only for the optimizer / gradient checker,
    // between graph constructions.
    std::vector<double>& mutable_data() { return node_->data; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    // Reverse-mode sweep from a scalar root. Each graph is single-use:
    // a second backward on the same root is an error.
    void backward() const {
        if (numel() != 1)
            throw GraphError("backward: loss is not scalar, shape " +
                             shape_str(shape()));
        if (!node_->requires_grad)
            throw GraphError("backward: loss does not require grad");
        if (node_->consumed)
            throw GraphError("backward: graph already consumed; graphs are single-use");
        node_->consumed = true;

        // iterative topological order over the requires_grad subgraph
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                detail::Node* p = n->parents[idx++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backprop) (*it)->backprop(**it);
        }
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(Shape shape, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backprop);
};

namespace detail {
inline thread_local bool no_grad_mode = false;
}

// Suppresses graph construction in its scope; ops produce plain values even
// from requires_grad inputs. Used on inference paths.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::no_grad_mode) { detail::no_grad_mode = true; }
    ~NoGradGuard() { detail::no_grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Builds the output node of an op; the backprop closure may capture the
// input nodes it needs.
inline Tensor make_op(Shape shape, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backprop) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = detail::buffer_pool.acquire(numel_of(n->shape));
    n->pooled = true;
    if (!detail::no_grad_mode) {
        for (const auto& in : inputs) {
            if (in.requires_grad()) n->requires_grad = true;
            n->parents.push_back(in.node());
        }
        if (n->requires_grad) n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

// b broadcasts into a when b.shape is a suffix of a.shape
inline bool suffix_broadcast(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
    return true;
}

inline void axpy(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

namespace detail {

// Shared implementation for add/sub/mul with suffix broadcasting of b into a.
template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 BwdA bwd_a, BwdB bwd_b) {
    if (!suffix_broadcast(a.shape(), b.shape()))
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " do not conform");
    auto an = a.node();
    auto bn = b.node();
    std::size_t bn_n = b.numel();
    bool same = bn_n == a.numel();
    Tensor out = make_op(a.shape(), {a, b}, [an, bn, bn_n, same, bwd_a, bwd_b](Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            if (same) {
                for (std::size_t i = 0; i < o.data.size(); ++i)
                    an->grad[i] += bwd_a(o.grad[i], an->data[i], bn->data[i]);
            } else {
                for (std::size_t i = 0; i < o.data.size(); ++i)
                    an->grad[i] += bwd_a(o.grad[i], an->data[i], bn->data[i % bn_n]);
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (same) {
                for (std::size_t i = 0; i < o.data.size(); ++i)
                    bn->grad[i] += bwd_b(o.grad[i], an->data[i], bn->data[i]);
            } else {
                for (std::size_t i = 0; i < o.data.size(); ++i)
                    bn->grad[i % bn_n] +=
                        bwd_b(o.grad[i], an->data[i], bn->data[i % bn_n]);
            }
        }
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    const auto& bd = b.data();
    if (same) {
        for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i]);
    } else {
        for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i], bd[i % bn_n]);
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd /* (g, x, y) -> dx */) {
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an, bwd](Node& o) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o.data.size(); ++i)
            an->grad[i] += bwd(o.grad[i], an->data[i], o.data[i]);
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(ad[i]);
    return out;
}

}  // namespace detail

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return c * x; },
        [c](double g, double, double) { return c * g; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return x + c; },
        [](double g, double, double) { return g; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x * x; },
        [](double g, double x, double) { return 2.0 * x * g; });
}

inline Tensor exp_(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); },
        [](double g, double, double y) { return g * y; });
}

inline Tensor log_(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); },
        [](double g, double x, double) { return g / x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double g, double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return g * (s + x * s * (1.0 - s));
        });
}

// exact (erf-based) gelu
inline Tensor gelu(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); },
        [](double g, double x, double) {
            double phi = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return g * (phi + x * pdf);
        });
}

inline Tensor detach(const Tensor& a) {
    return Tensor::from_data(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op({1}, {a}, [an](detail::Node& o) {
        an->ensure_grad();
        for (auto& g : an->grad) g += o.grad[0];
    });
    out.node()->data[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return out;
}

inline Tensor mean(const Tensor& a) {
    auto an = a.node();
    double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = make_op({1}, {a}, [an, inv_n](detail::Node& o) {
        an->ensure_grad();
        for (auto& g : an->grad) g += o.grad[0] * inv_n;
    });
    out.node()->data[0] =
        std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv_n;
    return out;
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    return mean(square(sub(a, b)));
}

// ------------------------------------------------------------------- shaping

inline Tensor reshape(const Tensor& a, Shape shape) {
    // one extent may be -1 (inferred)
    std::size_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            detail::require(infer < 0, "reshape: more than one inferred extent");
            infer = static_cast<int>(i);
        } else {
            known *= static_cast<std::size_t>(shape[i]);
        }
    }
    if (infer >= 0) shape[static_cast<std::size_t>(infer)] = static_cast<int>(a.numel() / known);
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
    auto an = a.node();
    Tensor out = make_op(shape, {a}, [an](detail::Node& o) {
        an->ensure_grad();
        detail::axpy(o.grad.size(), 1.0, o.grad.data(), an->grad.data());
    });
    out.node()->data = a.data();
    return out;
}

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    int nd = a.ndim();
    detail::require(static_cast<int>(axes.size()) == nd,
                    "permute: axes rank mismatch for " + shape_str(a.shape()));
    Shape out_shape(axes.size());
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);

    std::vector<std::size_t> in_strides(static_cast<std::size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(a.dim(i + 1));
    // stride in the input for each output axis
    std::vector<std::size_t> strides(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i)
        strides[i] = in_strides[static_cast<std::size_t>(axes[i])];

    auto an = a.node();
    std::size_t total = a.numel();
    // odometer walk over the output index space, tracking the source offset
    // incrementally instead of dividing per element
    auto walk = [out_shape, strides, total](auto&& visit) {
        int nd2 = static_cast<int>(out_shape.size());
        std::vector<std::size_t> ctr(static_cast<std::size_t>(nd2), 0);
        std::size_t src = 0;
        for (std::size_t oi = 0; oi < total; ++oi) {
            visit(oi, src);
            for (int i = nd2 - 1; i >= 0; --i) {
                auto ii = static_cast<std::size_t>(i);
                src += strides[ii];
                if (++ctr[ii] < static_cast<std::size_t>(out_shape[ii])) break;
                src -= strides[ii] * static_cast<std::size_t>(out_shape[ii]);
                ctr[ii] = 0;
            }
        }
    };
    Tensor out = make_op(out_shape, {a}, [an, walk](detail::Node& o) {
        an->ensure_grad();
        double* g = an->grad.data();
        const double* og = o.grad.data();
        walk([&](std::size_t oi, std::size_t src) { g[src] += og[oi]; });
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    walk([&](std::size_t oi, std::size_t src) { od[oi] = ad[src]; });
    return out;
}

// [B,N,heads*dh] -> [B*heads,N,dh]: the attention head layout in one strided
// copy instead of a reshape/permute chain.
inline Tensor split_heads(const Tensor& a, int heads) {
    detail::require(a.ndim() == 3 && a.dim(2) % heads == 0,
                    "split_heads: cannot split " + shape_str(a.shape()) + " into " +
                        std::to_string(heads) + " heads");
    int B = a.dim(0), N = a.dim(1), H = a.dim(2), dh = H / heads;
    auto an = a.node();
    auto each = [B, N, H, dh, heads](auto&& visit) {
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int n = 0; n < N; ++n)
                    visit(((static_cast<std::size_t>(b) * heads + h) * N + n) * dh,
                          (static_cast<std::size_t>(b) * N + n) * H +
                              static_cast<std::size_t>(h) * dh);
    };
    Tensor out = make_op({B * heads, N, dh}, {a}, [an, each, dh](detail::Node& o) {
        an->ensure_grad();
        double* g = an->grad.data();
        const double* og = o.grad.data();
        each([&](std::size_t oi, std::size_t src) {
            for (int j = 0; j < dh; ++j) g[src + static_cast<std::size_t>(j)] += og[oi + static_cast<std::size_t>(j)];
        });
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    each([&](std::size_t oi, std::size_t src) {
        std::copy_n(&ad[src], dh, &od[oi]);
    });
    return out;
}

// [B*heads,N,dh] -> [B,N,heads*dh], inverse of split_heads
inline Tensor merge_heads(const Tensor& a, int heads) {
    detail::require(a.ndim() == 3 && a.dim(0) % heads == 0,
                    "merge_heads: batch of " + shape_str(a.shape()) +
                        " not divisible by " + std::to_string(heads) + " heads");
    int B = a.dim(0) / heads, N = a.dim(1), dh = a.dim(2), H = heads * dh;
    auto an = a.node();
    auto each = [B, N, H, dh, heads](auto&& visit) {
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int n = 0; n < N; ++n)
                    visit((static_cast<std::size_t>(b) * N + n) * H +
                              static_cast<std::size_t>(h) * dh,
                          ((static_cast<std::size_t>(b) * heads + h) * N + n) * dh);
    };
    Tensor out = make_op({B, N, H}, {a}, [an, each, dh](detail::Node& o) {
        an->ensure_grad();
        double* g = an->grad.data();
        const double* og = o.grad.data();
        each([&](std::size_t oi, std::size_t src) {
            for (int j = 0; j < dh; ++j) g[src + static_cast<std::size_t>(j)] += og[oi + static_cast<std::size_t>(j)];
        });
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    each([&](std::size_t oi, std::size_t src) {
        std::copy_n(&ad[src], dh, &od[oi]);
    });
    return out;
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == b.ndim(),
                    "concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    for (int i = 0; i + 1 < a.ndim(); ++i)
        detail::require(a.dim(i) == b.dim(i),
                        "concat_last: leading dims differ, " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
    int la = a.dim(a.ndim() - 1), lb = b.dim(b.ndim() - 1);
    Shape out_shape = a.shape();
    out_shape.back() = la + lb;
    std::size_t rows = a.numel() / static_cast<std::size_t>(la);
    auto an = a.node();
    auto bn = b.node();
    Tensor out = make_op(out_shape, {a, b}, [an, bn, rows, la, lb](detail::Node& o) {
        std::size_t lo = static_cast<std::size_t>(la + lb);
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (int i = 0; i < la; ++i)
                    an->grad[r * static_cast<std::size_t>(la) + static_cast<std::size_t>(i)] +=
                        o.grad[r * lo + static_cast<std::size_t>(i)];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (int i = 0; i < lb; ++i)
                    bn->grad[r * static_cast<std::size_t>(lb) + static_cast<std::size_t>(i)] +=
                        o.grad[r * lo + static_cast<std::size_t>(la + i)];
        }
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::size_t lo = static_cast<std::size_t>(la + lb);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(&ad[r * static_cast<std::size_t>(la)], la, &od[r * lo]);
        std::copy_n(&bd[r * static_cast<std::size_t>(lb)], lb, &od[r * lo + static_cast<std::size_t>(la)]);
    }
    return out;
}

inline Tensor slice_last(const Tensor& a, int start, int len) {
    int last = a.dim(a.ndim() - 1);
    detail::require(start >= 0 && len > 0 && start + len <= last,
                    "slice_last: [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of range for " +
                        shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape.back() = len;
    std::size_t rows = a.numel() / static_cast<std::size_t>(last);
    auto an = a.node();
    Tensor out = make_op(out_shape, {a}, [an, rows, start, len, last](detail::Node& o) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (int i = 0; i < len; ++i)
                an->grad[r * static_cast<std::size_t>(last) + static_cast<std::size_t>(start + i)] +=
                    o.grad[r * static_cast<std::size_t>(len) + static_cast<std::size_t>(i)];
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(&ad[r * static_cast<std::size_t>(last) + static_cast<std::size_t>(start)], len,
                    &od[r * static_cast<std::size_t>(len)]);
    return out;
}

// ------------------------------------------------------------------- matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == 2 && b.ndim() == 2,
                    "matmul: expects 2-d operands, got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
    detail::require(a.dim(1) == b.dim(0),
                    "matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto an = a.node();
    auto bn = b.node();
    Tensor out = make_op({m, n}, {a, b}, [an, bn, m, k, n](detail::Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B^T
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0,
                        o.grad.data(), n, bn->data.data(), n, 1.0,
                        an->grad.data(), k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * dC
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0,
                        an->data.data(), k, o.grad.data(), n, 1.0,
                        bn->grad.data(), n);
        }
    });
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0,
                a.data().data(), k, b.data().data(), n, 0.0,
                out.node()->data.data(), n);
    return out;
}

// Batched matmul over the leading dim: a [B,m,k] x b [B,k,n] (optionally
// b transposed as [B,n,k]) -> [B,m,n].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false) {
    detail::require(a.ndim() == 3 && b.ndim() == 3,
                    "bmm: expects 3-d operands, got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
    detail::require(a.dim(0) == b.dim(0),
                    "bmm: batch dims differ, " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    int B = a.dim(0), m = a.dim(1), k = a.dim(2);
    int n = trans_b ? b.dim(1) : b.dim(2);
    int bk = trans_b ? b.dim(2) : b.dim(1);
    detail::require(bk == k, "bmm: inner dims differ, " + shape_str(a.shape()) +
                                 " x " + shape_str(b.shape()));
    auto an = a.node();
    auto bn = b.node();
    std::size_t as = static_cast<std::size_t>(m) * static_cast<std::size_t>(k);
    std::size_t bs = static_cast<std::size_t>(b.dim(1)) * static_cast<std::size_t>(b.dim(2));
    std::size_t os = static_cast<std::size_t>(m) * static_cast<std::size_t>(n);
    Tensor out = make_op({B, m, n}, {a, b},
                         [an, bn, B, m, k, n, as, bs, os, trans_b](detail::Node& o) {
        for (int i = 0; i < B; ++i) {
            const double* A = an->data.data() + static_cast<std::size_t>(i) * as;
            const double* Bm = bn->data.data() + static_cast<std::size_t>(i) * bs;
            const double* dC = o.grad.data() + static_cast<std::size_t>(i) * os;
            if (an->requires_grad) {
                an->ensure_grad();
                double* dA = an->grad.data() + static_cast<std::size_t>(i) * as;
                if (!trans_b)  // dA += dC * B^T
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n,
                                1.0, dC, n, Bm, n, 1.0, dA, k);
                else  // B stored as [n,k]: dA += dC * B
                    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, k, n,
                                1.0, dC, n, Bm, k, 1.0, dA, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* dB = bn->grad.data() + static_cast<std::size_t>(i) * bs;
                if (!trans_b)  // dB += A^T * dC
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m,
                                1.0, A, k, dC, n, 1.0, dB, n);
                else  // dB[n,k] += dC^T * A
                    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, k, m,
                                1.0, dC, n, A, k, 1.0, dB, k);
            }
        }
    });
    for (int i = 0; i < B; ++i) {
        const double* A = a.data().data() + static_cast<std::size_t>(i) * as;
        const double* Bm = b.data().data() + static_cast<std::size_t>(i) * bs;
        double* C = out.node()->data.data() + static_cast<std::size_t>(i) * os;
        cblas_dgemm(CblasRowMajor, CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                    m, n, k, 1.0, A, k, Bm, trans_b ? k : n, 0.0, C, n);
    }
    return out;
}

// ----------------------------------------------------- softmax / layer_norm

inline Tensor softmax_last(const Tensor& a) {
    int last = a.dim(a.ndim() - 1);
    std::size_t rows = a.numel() / static_cast<std::size_t>(last);
    auto an = a.node();
    Tensor out = make_op(a.shape(), {a}, [an, rows, last](detail::Node& o) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &o.data[r * static_cast<std::size_t>(last)];
            const double* g = &o.grad[r * static_cast<std::size_t>(last)];
            double dot = 0.0;
            for (int i = 0; i < last; ++i) dot += y[i] * g[i];
            double* dx = &an->grad[r * static_cast<std::size_t>(last)];
            for (int i = 0; i < last; ++i) dx[i] += y[i] * (g[i] - dot);
        }
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ad[r * static_cast<std::size_t>(last)];
        double* y = &od[r * static_cast<std::size_t>(last)];
        double mx = x[0];
        for (int i = 1; i < last; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int i = 0; i < last; ++i) s += (y[i] = std::exp(x[i] - mx));
        for (int i = 0; i < last; ++i) y[i] /= s;
    }
    return out;
}

// Normalizes the last dim to zero mean / unit variance (no affine part).
inline Tensor layer_norm_last(const Tensor& a, double eps = 1e-6) {
    int last = a.dim(a.ndim() - 1);
    std::size_t rows = a.numel() / static_cast<std::size_t>(last);
    auto an = a.node();
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    Tensor out = make_op(a.shape(), {a}, [an, rows, last, inv_std](detail::Node& o) {
        an->ensure_grad();
        double inv_n = 1.0 / last;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &o.data[r * static_cast<std::size_t>(last)];
            const double* g = &o.grad[r * static_cast<std::size_t>(last)];
            double gm = 0.0, gym = 0.0;
            for (int i = 0; i < last; ++i) {
                gm += g[i];
                gym += g[i] * y[i];
            }
            gm *= inv_n;
            gym *= inv_n;
            double is = (*inv_std)[r];
            double* dx = &an->grad[r * static_cast<std::size_t>(last)];
            for (int i = 0; i < last; ++i)
                dx[i] += is * (g[i] - gm - y[i] * gym);
        }
    });
    auto& od = out.node()->data;
    const auto& ad = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &ad[r * static_cast<std::size_t>(last)];
        double* y = &od[r * static_cast<std::size_t>(last)];
        double mu = 0.0;
        for (int i = 0; i < last; ++i) mu += x[i];
        mu /= last;
        double var = 0.0;
        for (int i = 0; i < last; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= last;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int i = 0; i < last; ++i) y[i] = (x[i] - mu) * is;
    }
    return out;
}

// ------------------------------------------------------------ classification

// Mean negative log-softmax probability of the target class.
// logits [N,K], targets length N with values in [0,K).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    detail::require(logits.ndim() == 2,
                    "cross_entropy: logits must be 2-d, got " +
                        shape_str(logits.shape()));
    int N = logits.dim(0), K = logits.dim(1);
    detail::require(static_cast<int>(targets.size()) == N,
                    "cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(N) + " rows");
    for (int t : targets)
        detail::require(t >= 0 && t < K, "cross_entropy: target " +
                                             std::to_string(t) + " out of [0," +
                                             std::to_string(K) + ")");
    auto ln = logits.node();
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    Tensor out = make_op({1}, {logits}, [ln, probs, targets, N, K](detail::Node& o) {
        ln->ensure_grad();
        double g = o.grad[0] / N;
        for (int r = 0; r < N; ++r) {
            const double* p = &(*probs)[static_cast<std::size_t>(r) * K];
            double* dx = &ln->grad[static_cast<std::size_t>(r) * K];
            for (int i = 0; i < K; ++i) dx[i] += g * p[i];
            dx[targets[static_cast<std::size_t>(r)]] -= g;
        }
    });
    const auto& ld = logits.data();
    double loss = 0.0;
    for (int r = 0; r < N; ++r) {
        const double* x = &ld[static_cast<std::size_t>(r) * K];
        double* p = &(*probs)[static_cast<std::size_t>(r) * K];
        double mx = x[0];
        for (int i = 1; i < K; ++i) mx = std::max(mx, x[i]);
        double s = 0.0;
        for (int i = 0; i < K; ++i) s += (p[i] = std::exp(x[i] - mx));
        for (int i = 0; i < K; ++i) p[i] /= s;
        loss -= std::log(p[targets[static_cast<std::size_t>(r)]]);
    }
    out.node()->data[0] = loss / N;
    return out;
}

// table [V,H], ids length n -> [n,H]; gradient scatters into the table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    detail::require(table.ndim() == 2, "embedding: table must be 2-d, got " +
                                           shape_str(table.shape()));
    int V = table.dim(0), H = table.dim(1);
    for (int id : ids)
        detail::require(id >= 0 && id < V, "embedding: index " +
                                               std::to_string(id) +
                                               " out of [0," + std::to_string(V) + ")");
    int n = static_cast<int>(ids.size());
    auto tn = table.node();
    Tensor out = make_op({n, H}, {table}, [tn, ids, H](detail::Node& o) {
        tn->ensure_grad();
        for (std::size_t r = 0; r < ids.size(); ++r)
            detail::axpy(static_cast<std::size_t>(H), 1.0,
                         &o.grad[r * static_cast<std::size_t>(H)],
                         &tn->grad[static_cast<std::size_t>(ids[r]) * H]);
    });
    auto& od = out.node()->data;
    const auto& td = table.data();
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(&td[static_cast<std::size_t>(ids[r]) * H], H,
                    &od[r * static_cast<std::size_t>(H)]);
    return out;
}

// -------------------------------------------------- token-wise conditioning

namespace detail {

inline void check_tokens_cond(const char* name, const Tensor& x, const Tensor& c) {
    require(x.ndim() == 3 && c.ndim() == 2 && x.dim(0) == c.dim(0) &&
                x.dim(2) == c.dim(1),
            std::string(name) + ": shapes " + shape_str(x.shape()) + " and " +
                shape_str(c.shape()) + " do not conform");
}

}  // namespace detail

// x [B,N,H], scale/shift [B,H]: y = x * (1 + scale) + shift, broadcast over N.
inline Tensor affine_tokens(const Tensor& x, const Tensor& scale_t,
                            const Tensor& shift_t) {
    detail::check_tokens_cond("affine_tokens", x, scale_t);
    detail::check_tokens_cond("affine_tokens", x, shift_t);
    int B = x.dim(0), N = x.dim(1), H = x.dim(2);
    auto xn = x.node();
    auto sn = scale_t.node();
    auto hn = shift_t.node();
    Tensor out = make_op(x.shape(), {x, scale_t, shift_t},
                         [xn, sn, hn, B, N, H](detail::Node& o) {
        for (int b = 0; b < B; ++b) {
            const double* s = &sn->data[static_cast<std::size_t>(b) * H];
            for (int n = 0; n < N; ++n) {
                std::size_t off = (static_cast<std::size_t>(b) * N + n) * H;
                const double* g = &o.grad[off];
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double* dx = &xn->grad[off];
                    for (int i = 0; i < H; ++i) dx[i] += g[i] * (1.0 + s[i]);
                }
                if (sn->requires_grad) {
                    sn->ensure_grad();
                    double* ds = &sn->grad[static_cast<std::size_t>(b) * H];
                    const double* xv = &xn->data[off];
                    for (int i = 0; i < H; ++i) ds[i] += g[i] * xv[i];
                }
                if (hn->requires_grad) {
                    hn->ensure_grad();
                    double* dh = &hn->grad[static_cast<std::size_t>(b) * H];
                    for (int i = 0; i < H; ++i) dh[i] += g[i];
                }
            }
        }
    });
    auto& od = out.node()->data;
    for (int b = 0; b < B; ++b) {
        const double* s = &scale_t.data()[static_cast<std::size_t>(b) * H];
        const double* sh = &shift_t.data()[static_cast<std::size_t>(b) * H];
        for (int n = 0; n < N; ++n) {
            std::size_t off = (static_cast<std::size_t>(b) * N + n) * H;
            const double* xv = &x.data()[off];
            for (int i = 0; i < H; ++i) od[off + i] = xv[i] * (1.0 + s[i]) + sh[i];
        }
    }
    return out;
}

// x [B,N,H], g [B,H]: y = x * g, broadcast over N.
inline Tensor gate_tokens(const Tensor& x, const Tensor& g_t) {
    detail::check_tokens_cond("gate_tokens", x, g_t);
    int B = x.dim(0), N = x.dim(1), H = x.dim(2);
    auto xn = x.node();
    auto gn = g_t.node();
    Tensor out = make_op(x.shape(), {x, g_t}, [xn, gn, B, N, H](detail::Node& o) {
        for (int b = 0; b < B; ++b) {
            const double* gv = &gn->data[static_cast<std::size_t>(b) * H];
            for (int n = 0; n < N; ++n) {
                std::size_t off = (static_cast<std::size_t>(b) * N + n) * H;
                const double* g = &o.grad[off];
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double* dx = &xn->grad[off];
                    for (int i = 0; i < H; ++i) dx[i] += g[i] * gv[i];
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    double* dg = &gn->grad[static_cast<std::size_t>(b) * H];
                    const double* xv = &xn->data[off];
                    for (int i = 0; i < H; ++i) dg[i] += g[i] * xv[i];
                }
            }
        }
    });
    auto& od = out.node()->data;
    for (int b = 0; b < B; ++b) {
        const double* gv = &g_t.data()[static_cast<std::size_t>(b) * H];
        for (int n = 0; n < N; ++n) {
            std::size_t off = (static_cast<std::size_t>(b) * N + n) * H;
            const double* xv = &x.data()[off];
            for (int i = 0; i < H; ++i) od[off + i] = xv[i] * gv[i];
        }
    }
    return out;
}

}  // namespace rdpm
