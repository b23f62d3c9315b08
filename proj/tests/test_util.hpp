#pragma once

// Independent oracles used by the tests: a naive 6-loop convolution, an
// explicit-loop matmul, and small helpers. These deliberately share no code
// with the implementation they check.

#include <cmath>
#include <vector>

#include "sphg/tensor.hpp"

namespace sphg_test {

using sphg::Rng;
using sphg::Tensor;
using sphg::TensorPtr;

// direct convolution: same zero padding, pad = dilation*(k-1)/2
inline TensorPtr naive_conv2d(const TensorPtr& in, const TensorPtr& w, const TensorPtr& b,
                              int dilation) {
    const int B = in->dim(0), Ci = in->dim(1), H = in->dim(2), W = in->dim(3);
    const int Co = w->dim(0), K = w->dim(2);
    const int pad = dilation * (K - 1) / 2;
    auto out = Tensor::zeros({B, Co, H, W});
    for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Co; ++co)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double acc = b->data[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ky = 0; ky < K; ++ky)
                            for (int kx = 0; kx < K; ++kx) {
                                const int iy = y - pad + ky * dilation;
                                const int ix = x - pad + kx * dilation;
                                if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
                                acc += w->at(co, ci, ky, kx) * in->at(bb, ci, iy, ix);
                            }
                    out->at(bb, co, y, x) = acc;
                }
    return out;
}

// explicit-loop matmul oracle for dense: y[b,m] = sum_n x[b,n] w[m,n] + bias[m]
inline TensorPtr naive_dense(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    const int B = x->dim(0), N = x->dim(1), M = w->dim(0);
    auto out = Tensor::zeros({B, M});
    for (int bb = 0; bb < B; ++bb)
        for (int m = 0; m < M; ++m) {
            double acc = b->data[static_cast<std::size_t>(m)];
            for (int n = 0; n < N; ++n) {
                acc += x->data[static_cast<std::size_t>(bb * N + n)] *
                       w->data[static_cast<std::size_t>(m * N + n)];
            }
            out->data[static_cast<std::size_t>(bb * M + m)] = acc;
        }
    return out;
}

inline TensorPtr random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0,
                               bool requires_grad = false) {
    auto t = Tensor::randn(std::move(shape), rng, scale, requires_grad);
    return t;
}

inline double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        m = std::max(m, std::abs(a->data[i] - b->data[i]));
    }
    return m;
}

inline bool bit_equal(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) return false;
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        if (a->data[i] != b->data[i]) return false;
    }
    return true;
}

}  // namespace sphg_test
