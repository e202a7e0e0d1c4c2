#pragma once

#include <functional>

#include "rdpm/tensor.hpp"

namespace rdpm {

struct GradCheckReport {
    std::vector<double> rel_err;   // one entry per checked coordinate
    std::vector<std::size_t> idx;  // coordinate index of each entry
    double max_rel_err = 0.0;
    std::size_t worst = 0;
    bool pass = false;
};

// Compares the autodiff gradient of a scalar-valued function against central
// finite differences. `f` must rebuild its graph from `p` on every call; the
// checker perturbs p's storage in place between evaluations. When
// `max_coords` > 0 only that many coordinates are probed (deterministic
// stride over the parameter).
inline GradCheckReport grad_check(const std::function<Tensor(Tensor&)>& f,
                                  Tensor p, double h, double tol,
                                  int max_coords = -1) {
    Tensor loss = f(p);
    if (!std::isfinite(loss.value()))
        throw GraphError("grad_check: non-finite loss at base point");
    p.zero_grad();
    loss.backward();
    std::vector<double> g = p.grad();

    std::size_t n = p.numel();
    std::size_t count = (max_coords > 0 && static_cast<std::size_t>(max_coords) < n)
                            ? static_cast<std::size_t>(max_coords)
                            : n;
    std::size_t stride = n / count;
    if (stride == 0) stride = 1;

    GradCheckReport rep;
    auto& data = p.mutable_data();
    for (std::size_t c = 0; c < count; ++c) {
        std::size_t i = (c * stride) % n;
        double orig = data[i];
        data[i] = orig + h;
        double fp = f(p).value();
        data[i] = orig - h;
        double fm = f(p).value();
        data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw GraphError("grad_check: non-finite value at coordinate " +
                             std::to_string(i));
        double num = (fp - fm) / (2.0 * h);
        double denom = std::max({std::abs(num), std::abs(g[i]), 1e-8});
        double rel = std::abs(num - g[i]) / denom;
        rep.rel_err.push_back(rel);
        rep.idx.push_back(i);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst = i;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace rdpm
