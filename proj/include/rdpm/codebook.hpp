#pragma once

#include <cstdint>
#include <vector>

#include "rdpm/nn.hpp"
#include "rdpm/tensor.hpp"

namespace rdpm {

// K learnable embeddings of dimension d. Nearest-neighbor search is a plain
// per-row scan in index order with strict-improvement updates, so exact ties
// resolve to the lowest index.
struct Codebook {
    int K = 0;
    int d = 0;
    Tensor embeddings;  // [K, d]

    Codebook() = default;
    Codebook(Params& ps, int K_, int d_, Rng& rng) : K(K_), d(d_) {
        // rows spread at roughly unit scale so untrained codebooks still
        // tile the layer-normalized latent space
        embeddings = ps.add("codebook.embeddings",
                            init::normal({K, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    }

    const double* row(int k) const {
        if (k < 0 || k >= K)
            throw std::out_of_range("Codebook::row: index " + std::to_string(k) +
                                    " out of [0," + std::to_string(K) + ")");
        return embeddings.data().data() + static_cast<std::size_t>(k) * d;
    }

    // codes[i] = argmin_k ||q_i - e_k||^2 for queries q [n, d]
    std::vector<int> nearest(const double* q, int n) const {
        std::vector<int> codes(static_cast<std::size_t>(n));
        const double* e = embeddings.data().data();
        for (int i = 0; i < n; ++i) {
            const double* qi = q + static_cast<std::size_t>(i) * d;
            int best = 0;
            double best_d = 0.0;
            for (int k = 0; k < K; ++k) {
                const double* ek = e + static_cast<std::size_t>(k) * d;
                double dist = 0.0;
                for (int j = 0; j < d; ++j) {
                    double diff = qi[j] - ek[j];
                    dist += diff * diff;
                }
                if (k == 0 || dist < best_d) {
                    best_d = dist;
                    best = k;
                }
            }
            codes[static_cast<std::size_t>(i)] = best;
        }
        return codes;
    }
};

struct QuantizeResult {
    std::vector<int> codes;
    Tensor straight_through;  // v + sg(e[c] - v): decoder path, grads to v
    Tensor rows;              // e[c] as a graph lookup: grads to the codebook
};

// Nearest-neighbor quantization of rows of v [n, d]. The value of both output
// tensors is the selected embedding row; they differ only in which side of
// the non-differentiable lookup the gradient reaches.
inline QuantizeResult quantize(const Tensor& v, const Codebook& codebook) {
    detail::require(v.ndim() == 2 && v.dim(1) == codebook.d,
                    "quantize: expected [n," + std::to_string(codebook.d) +
                        "] queries, got " + shape_str(v.shape()));
    int n = v.dim(0);
    QuantizeResult r;
    r.codes = codebook.nearest(v.data().data(), n);
    r.rows = embedding(codebook.embeddings, r.codes);
    r.straight_through = add(v, detach(sub(r.rows, v)));
    return r;
}

}  // namespace rdpm
