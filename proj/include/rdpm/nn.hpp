#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rdpm/conv.hpp"
#include "rdpm/tensor.hpp"

namespace rdpm {

// Named parameter list. Order is construction order and defines the weight
// blob order in checkpoints.
struct Params {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor add(const std::string& name, Tensor t) {
        items.emplace_back(name, t);
        return t;
    }
    void zero_grad() {
        for (auto& [n, t] : items) t.zero_grad();
    }
    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& [nm, t] : items) n += t.numel();
        return n;
    }
    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace init {

inline Tensor normal(Shape shape, Rng& rng, double stddev) {
    return Tensor::randn(std::move(shape), rng, stddev, true);
}

inline Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }

// fan-in scaled init for linear [in,out] / conv [O,C,kh,kw] weights
inline Tensor kaiming(Shape shape, Rng& rng) {
    std::size_t fan_in = 1;
    if (shape.size() == 2) {
        fan_in = static_cast<std::size_t>(shape[0]);
    } else if (shape.size() == 4) {
        fan_in = static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
    }
    return normal(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace init

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(Params& ps, const std::string& name, int in, int out, Rng& rng,
           bool zero_init = false) {
        w = ps.add(name + ".w", zero_init ? init::zeros({in, out})
                                          : init::kaiming({in, out}, rng));
        b = ps.add(name + ".b", init::zeros({out}));
    }

    Tensor forward(const Tensor& x) const {
        int in = w.dim(0);
        Shape out_shape = x.shape();
        out_shape.back() = w.dim(1);
        Tensor x2 = reshape(x, {-1, in});
        return reshape(add(matmul(x2, w), b), std::move(out_shape));
    }
};

struct Conv2dLayer {
    Tensor w;  // [O,C,kh,kw]
    Tensor b;  // [O]
    int stride = 1;
    int pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(Params& ps, const std::string& name, int in_ch, int out_ch, int k,
                int stride_, int pad_, Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", zero_init ? init::zeros({out_ch, in_ch, k, k})
                                          : init::kaiming({out_ch, in_ch, k, k}, rng));
        b = ps.add(name + ".b", init::zeros({out_ch}));
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

// Gradient clipping by global L2 norm across all parameters. Returns the
// pre-clip norm.
inline double clip_grad_norm(Params& ps, double max_norm) {
    double sq = 0.0;
    for (auto& [n, t] : ps.items) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (auto& [n, t] : ps.items) {
            if (!t.has_grad()) continue;
            for (double& g : t.mutable_grad()) g *= s;
        }
    }
    return norm;
}

// AdamW with decoupled weight decay and linear lr warmup. Plain Adam is the
// weight_decay = 0 case.
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;
    int step_count = 0;
    std::vector<std::vector<double>> m, v;

    void init(const Params& ps) {
        m.clear();
        v.clear();
        for (const auto& [n, t] : ps.items) {
            m.emplace_back(t.numel(), 0.0);
            v.emplace_back(t.numel(), 0.0);
        }
    }

    double current_lr() const {
        if (warmup_steps > 0 && step_count < warmup_steps)
            return lr * static_cast<double>(step_count + 1) / warmup_steps;
        return lr;
    }

    void step(Params& ps) {
        double lr_t = current_lr();
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, step_count);
        double bc2 = 1.0 - std::pow(beta2, step_count);
        double step_scale = lr_t / bc1;
        double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
        double decay_scale = lr_t * weight_decay;
        for (std::size_t pi = 0; pi < ps.items.size(); ++pi) {
            auto& t = ps.items[pi].second;
            if (!t.has_grad()) continue;
            const auto& g = t.grad();
            auto& d = t.mutable_data();
            auto& mi = m[pi];
            auto& vi = v[pi];
            for (std::size_t i = 0; i < d.size(); ++i) {
                mi[i] = beta1 * mi[i] + (1.0 - beta1) * g[i];
                vi[i] = beta2 * vi[i] + (1.0 - beta2) * g[i] * g[i];
                d[i] -= step_scale * mi[i] / (std::sqrt(vi[i]) * inv_sqrt_bc2 + eps) +
                        decay_scale * d[i];
            }
        }
    }
};

// Exponential moving average of parameter values, kept alongside the raw
// weights and used at sampling time.
struct Ema {
    double decay = 0.999;
    std::vector<std::vector<double>> shadow;

    void init(const Params& ps) {
        shadow.clear();
        for (const auto& [n, t] : ps.items) shadow.push_back(t.data());
    }
    void update(const Params& ps) {
        for (std::size_t pi = 0; pi < ps.items.size(); ++pi) {
            const auto& d = ps.items[pi].second.data();
            auto& s = shadow[pi];
            for (std::size_t i = 0; i < d.size(); ++i)
                s[i] = decay * s[i] + (1.0 - decay) * d[i];
        }
    }
    void copy_to(Params& ps) const {
        for (std::size_t pi = 0; pi < ps.items.size(); ++pi)
            ps.items[pi].second.mutable_data() = shadow[pi];
    }
};

}  // namespace rdpm
