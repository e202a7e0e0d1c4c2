#pragma once

#include "rdpm/tensor.hpp"

namespace rdpm {

namespace detail {

// NCHW im2col for one image: col is [C*kh*kw, Ho*Wo]
inline void im2col(const double* x, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int Ho, int Wo, double* col) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                double* row = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                        (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int y = oy * stride + i - pad;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int xx = ox * stride + j - pad;
                        row[oy * Wo + ox] =
                            (y >= 0 && y < H && xx >= 0 && xx < W)
                                ? x[(static_cast<std::size_t>(c) * H + y) * W + xx]
                                : 0.0;
                    }
                }
            }
}

inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw,
                       int stride, int pad, int Ho, int Wo, double* x) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                const double* row = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                              (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int y = oy * stride + i - pad;
                    if (y < 0 || y >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int xx = ox * stride + j - pad;
                        if (xx < 0 || xx >= W) continue;
                        x[(static_cast<std::size_t>(c) * H + y) * W + xx] +=
                            row[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace detail

// x [B,C,H,W], w [O,C,kh,kw], bias [O] -> [B,O,Ho,Wo]. im2col + dgemm; the
// column buffer is recomputed in the backward pass instead of stored.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride, int pad) {
    detail::require(x.ndim() == 4 && w.ndim() == 4,
                    "conv2d: expects 4-d input and weight, got " +
                        shape_str(x.shape()) + " and " + shape_str(w.shape()));
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    detail::require(w.dim(1) == C, "conv2d: channel mismatch, input " +
                                       shape_str(x.shape()) + " weight " +
                                       shape_str(w.shape()));
    detail::require(bias.ndim() == 1 && bias.dim(0) == O,
                    "conv2d: bias shape " + shape_str(bias.shape()) +
                        " does not match " + std::to_string(O) + " filters");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    int ck = C * kh * kw;
    std::size_t sp = static_cast<std::size_t>(Ho) * Wo;
    std::size_t in_sz = static_cast<std::size_t>(C) * H * W;
    std::size_t out_sz = static_cast<std::size_t>(O) * sp;

    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    Tensor out = make_op({B, O, Ho, Wo}, {x, w, bias},
                         [=](detail::Node& o) {
        std::vector<double> col(static_cast<std::size_t>(ck) * sp);
        std::vector<double> dcol(static_cast<std::size_t>(ck) * sp);
        for (int b = 0; b < B; ++b) {
            const double* xb = xn->data.data() + static_cast<std::size_t>(b) * in_sz;
            const double* go = o.grad.data() + static_cast<std::size_t>(b) * out_sz;
            if (wn->requires_grad || xn->requires_grad)
                detail::im2col(xb, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
            if (wn->requires_grad) {
                wn->ensure_grad();
                // dW += dOut * col^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, O, ck,
                            static_cast<int>(sp), 1.0, go, static_cast<int>(sp),
                            col.data(), static_cast<int>(sp), 1.0,
                            wn->grad.data(), ck);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dcol = W^T * dOut
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, ck,
                            static_cast<int>(sp), O, 1.0, wn->data.data(), ck,
                            go, static_cast<int>(sp), 0.0, dcol.data(),
                            static_cast<int>(sp));
                detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho,
                                   Wo, xn->grad.data() + static_cast<std::size_t>(b) * in_sz);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int oc = 0; oc < O; ++oc) {
                    double s = 0.0;
                    const double* g = go + static_cast<std::size_t>(oc) * sp;
                    for (std::size_t i = 0; i < sp; ++i) s += g[i];
                    bn->grad[static_cast<std::size_t>(oc)] += s;
                }
            }
        }
    });
    std::vector<double> col(static_cast<std::size_t>(ck) * sp);
    auto& od = out.node()->data;
    for (int b = 0; b < B; ++b) {
        const double* xb = x.data().data() + static_cast<std::size_t>(b) * in_sz;
        double* ob = od.data() + static_cast<std::size_t>(b) * out_sz;
        detail::im2col(xb, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, O,
                    static_cast<int>(sp), ck, 1.0, w.data().data(), ck,
                    col.data(), static_cast<int>(sp), 0.0, ob,
                    static_cast<int>(sp));
        for (int oc = 0; oc < O; ++oc) {
            double bv = bias.data()[static_cast<std::size_t>(oc)];
            double* row = ob + static_cast<std::size_t>(oc) * sp;
            for (std::size_t i = 0; i < sp; ++i) row[i] += bv;
        }
    }
    return out;
}

// x [B,C,H,W] -> [B,C,2H,2W], nearest neighbor.
inline Tensor upsample_nearest2(const Tensor& x) {
    detail::require(x.ndim() == 4, "upsample_nearest2: expects 4-d input, got " +
                                       shape_str(x.shape()));
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto xn = x.node();
    Tensor out = make_op({B, C, 2 * H, 2 * W}, {x}, [xn, B, C, H, W](detail::Node& o) {
        xn->ensure_grad();
        int W2 = 2 * W;
        for (int bc = 0; bc < B * C; ++bc) {
            const double* g = &o.grad[static_cast<std::size_t>(bc) * 4 * H * W];
            double* dx = &xn->grad[static_cast<std::size_t>(bc) * H * W];
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    dx[y * W + xx] += g[(2 * y) * W2 + 2 * xx] +
                                      g[(2 * y) * W2 + 2 * xx + 1] +
                                      g[(2 * y + 1) * W2 + 2 * xx] +
                                      g[(2 * y + 1) * W2 + 2 * xx + 1];
        }
    });
    auto& od = out.node()->data;
    const auto& ad = x.data();
    int W2 = 2 * W;
    for (int bc = 0; bc < B * C; ++bc) {
        const double* xv = &ad[static_cast<std::size_t>(bc) * H * W];
        double* y = &od[static_cast<std::size_t>(bc) * 4 * H * W];
        for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx) {
                double v = xv[yy * W + xx];
                y[(2 * yy) * W2 + 2 * xx] = v;
                y[(2 * yy) * W2 + 2 * xx + 1] = v;
                y[(2 * yy + 1) * W2 + 2 * xx] = v;
                y[(2 * yy + 1) * W2 + 2 * xx + 1] = v;
            }
    }
    return out;
}

}  // namespace rdpm
