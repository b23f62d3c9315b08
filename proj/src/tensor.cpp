#include "sphg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "sphg/threading.hpp"

namespace sphg {

namespace {

bool g_grad_enabled = true;

std::int64_t product(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents) {
    auto t = Tensor::create(std::move(shape), false);
    if (g_grad_enabled) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p->requires_grad;
        if (rg) {
            t->requires_grad = true;
            t->parents = std::move(parents);
        }
    }
    return t;
}

bool grad_enabled() { return g_grad_enabled; }
GradGuard::GradGuard(bool enable) : prev(g_grad_enabled) { g_grad_enabled = enable; }
GradGuard::~GradGuard() { g_grad_enabled = prev; }

TensorPtr Tensor::create(std::vector<int> shape, bool requires_grad) {
    for (int d : shape) {
        if (d <= 0) throw ConfigError("tensor extent must be positive");
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data.assign(static_cast<std::size_t>(product(t->shape)), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (product(shape) != static_cast<std::int64_t>(data.size())) {
        throw ConfigError("tensor data size does not match shape");
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return create(std::move(shape), requires_grad);
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto t = create(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    auto t = create(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.gaussian() * stddev;
    return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

double& Tensor::at(int b, int c, int y, int x) {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
}
double Tensor::at(int b, int c, int y, int x) const {
    return data[((static_cast<std::size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

TensorPtr Tensor::detached() const {
    auto t = std::make_shared<Tensor>();
    t->shape = shape;
    t->data = data;
    return t;
}

void check_finite(const Tensor& t, const char* what) {
    for (double v : t.data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

static void check_finite_buf(const std::vector<double>& buf, const char* what) {
    for (double v : buf) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

// ---- conv2d ----------------------------------------------------------------

ConvKernel ConvKernel::make(int c_out, int c_in, int k, int dilation, Rng& rng) {
    ConvKernel kk;
    const double stddev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    kk.weights = Tensor::randn({c_out, c_in, k, k}, rng, stddev, true);
    quantize_f32(*kk.weights);
    kk.bias = Tensor::zeros({c_out}, true);
    kk.dilation = dilation;
    return kk;
}

TensorPtr conv2d(const TensorPtr& input, const ConvKernel& kernel) {
    return conv2d(input, kernel.weights, kernel.bias, kernel.dilation, kernel.stride);
}

TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weights, const TensorPtr& bias,
                 int dilation, int stride) {
    if (input->ndim() != 4 || weights->ndim() != 4 || bias->ndim() != 1) {
        throw ConfigError("conv2d expects input [B,C,H,W], weights [Co,Ci,k,k], bias [Co]");
    }
    const int B = input->dim(0), Ci = input->dim(1), H = input->dim(2), W = input->dim(3);
    const int Co = weights->dim(0), K = weights->dim(2);
    if (weights->dim(1) != Ci) throw ConfigError("conv2d input channels do not match kernel");
    if (weights->dim(3) != K || K % 2 == 0) throw ConfigError("conv2d kernel must be square, odd");
    if (bias->dim(0) != Co) throw ConfigError("conv2d bias size does not match C_out");
    if (dilation < 1 || stride < 1) throw ConfigError("conv2d dilation/stride must be >= 1");

    const int pad = dilation * (K - 1) / 2;
    const int Ho = (H + 2 * pad - (K + (K - 1) * (dilation - 1))) / stride + 1;
    const int Wo = (W + 2 * pad - (K + (K - 1) * (dilation - 1))) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ConfigError("conv2d output would be empty");

    auto out = make_node({B, Co, Ho, Wo}, {input, weights, bias});
    const double* id = input->data.data();
    const double* wd = weights->data.data();
    const double* bd = bias->data.data();
    double* od = out->data.data();

    parallel_for(static_cast<std::int64_t>(B) * Co, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t idx = lo; idx < hi; ++idx) {
            const int b = static_cast<int>(idx / Co);
            const int co = static_cast<int>(idx % Co);
            double* out_bc = od + idx * Ho * Wo;
            const double bv = bd[co];
            for (int j = 0; j < Ho * Wo; ++j) out_bc[j] = bv;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* in_bc = id + (static_cast<std::int64_t>(b) * Ci + ci) * H * W;
                const double* w_cc = wd + (static_cast<std::int64_t>(co) * Ci + ci) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                    const int oy = ky * dilation - pad;
                    const int y0 = std::max(0, ceil_div(-oy, stride));
                    const int y1 = std::min(Ho, floor_div(H - 1 - oy, stride) + 1);
                    for (int kx = 0; kx < K; ++kx) {
                        const int ox = kx * dilation - pad;
                        const int x0 = std::max(0, ceil_div(-ox, stride));
                        const int x1 = std::min(Wo, floor_div(W - 1 - ox, stride) + 1);
                        const double wv = w_cc[ky * K + kx];
                        for (int yo = y0; yo < y1; ++yo) {
                            const double* irow = in_bc + (yo * stride + oy) * W + ox;
                            double* orow = out_bc + yo * Wo;
                            if (stride == 1) {
                                for (int xo = x0; xo < x1; ++xo) orow[xo] += wv * irow[xo];
                            } else {
                                for (int xo = x0; xo < x1; ++xo) orow[xo] += wv * irow[xo * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    check_finite(*out, "conv2d");

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = input, w = weights, bt = bias;
        out->backward_fn = [o, x, w, bt, B, Ci, H, W, Co, K, Ho, Wo, pad, dilation, stride] {
            const double* go = o->grad.data();
            const double* wd2 = w->data.data();
            const double* id2 = x->data.data();

            if (x->requires_grad) {
                x->ensure_grad();
                double* gi = x->grad.data();
                parallel_for(static_cast<std::int64_t>(B) * Ci, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t idx = lo; idx < hi; ++idx) {
                        const int b = static_cast<int>(idx / Ci);
                        const int ci = static_cast<int>(idx % Ci);
                        double* gi_bc = gi + idx * H * W;
                        for (int co = 0; co < Co; ++co) {
                            const double* go_bc =
                                go + (static_cast<std::int64_t>(b) * Co + co) * Ho * Wo;
                            const double* w_cc =
                                wd2 + (static_cast<std::int64_t>(co) * Ci + ci) * K * K;
                            for (int ky = 0; ky < K; ++ky) {
                                const int oy = ky * dilation - pad;
                                const int y0 = std::max(0, ceil_div(-oy, stride));
                                const int y1 = std::min(Ho, floor_div(H - 1 - oy, stride) + 1);
                                for (int kx = 0; kx < K; ++kx) {
                                    const int ox = kx * dilation - pad;
                                    const int x0 = std::max(0, ceil_div(-ox, stride));
                                    const int x1 = std::min(Wo, floor_div(W - 1 - ox, stride) + 1);
                                    const double wv = w_cc[ky * K + kx];
                                    for (int yo = y0; yo < y1; ++yo) {
                                        double* girow = gi_bc + (yo * stride + oy) * W + ox;
                                        const double* gorow = go_bc + yo * Wo;
                                        if (stride == 1) {
                                            for (int xo = x0; xo < x1; ++xo)
                                                girow[xo] += wv * gorow[xo];
                                        } else {
                                            for (int xo = x0; xo < x1; ++xo)
                                                girow[xo * stride] += wv * gorow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }

            if (w->requires_grad) {
                w->ensure_grad();
                double* gw = w->grad.data();
                parallel_for(static_cast<std::int64_t>(Co) * Ci, [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t idx = lo; idx < hi; ++idx) {
                        const int co = static_cast<int>(idx / Ci);
                        const int ci = static_cast<int>(idx % Ci);
                        double* gw_cc = gw + idx * K * K;
                        for (int ky = 0; ky < K; ++ky) {
                            const int oy = ky * dilation - pad;
                            const int y0 = std::max(0, ceil_div(-oy, stride));
                            const int y1 = std::min(Ho, floor_div(H - 1 - oy, stride) + 1);
                            for (int kx = 0; kx < K; ++kx) {
                                const int ox = kx * dilation - pad;
                                const int x0 = std::max(0, ceil_div(-ox, stride));
                                const int x1 = std::min(Wo, floor_div(W - 1 - ox, stride) + 1);
                                double acc = 0.0;
                                for (int b = 0; b < B; ++b) {
                                    const double* go_bc =
                                        go + (static_cast<std::int64_t>(b) * Co + co) * Ho * Wo;
                                    const double* in_bc =
                                        id2 + (static_cast<std::int64_t>(b) * Ci + ci) * H * W;
                                    for (int yo = y0; yo < y1; ++yo) {
                                        const double* irow = in_bc + (yo * stride + oy) * W + ox;
                                        const double* gorow = go_bc + yo * Wo;
                                        if (stride == 1) {
                                            for (int xo = x0; xo < x1; ++xo)
                                                acc += gorow[xo] * irow[xo];
                                        } else {
                                            for (int xo = x0; xo < x1; ++xo)
                                                acc += gorow[xo] * irow[xo * stride];
                                        }
                                    }
                                }
                                gw_cc[ky * K + kx] += acc;
                            }
                        }
                    }
                });
            }

            if (bt->requires_grad) {
                bt->ensure_grad();
                double* gb = bt->grad.data();
                for (int co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    for (int b = 0; b < B; ++b) {
                        const double* go_bc = go + (static_cast<std::int64_t>(b) * Co + co) * Ho * Wo;
                        for (int j = 0; j < Ho * Wo; ++j) acc += go_bc[j];
                    }
                    gb[co] += acc;
                }
            }
        };
    }
    return out;
}

// ---- pooling / upsampling --------------------------------------------------

TensorPtr maxpool2x2(const TensorPtr& input) {
    if (input->ndim() != 4) throw ConfigError("maxpool2x2 expects [B,C,H,W]");
    const int B = input->dim(0), C = input->dim(1), H = input->dim(2), W = input->dim(3);
    if (H % 2 != 0 || W % 2 != 0) throw ConfigError("maxpool2x2 requires even spatial dims");
    const int Ho = H / 2, Wo = W / 2;

    auto out = make_node({B, C, Ho, Wo}, {input});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size());
    const double* id = input->data.data();
    double* od = out->data.data();
    std::int64_t* am = argmax->data();

    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* in_bc = id + bc * H * W;
        double* out_bc = od + bc * Ho * Wo;
        std::int64_t* am_bc = am + bc * Ho * Wo;
        for (int yo = 0; yo < Ho; ++yo) {
            for (int xo = 0; xo < Wo; ++xo) {
                // ties keep the first element in row-major window order
                std::int64_t best_idx = (2 * yo) * W + 2 * xo;
                double best = in_bc[best_idx];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::int64_t ii = (2 * yo + dy) * W + 2 * xo + dx;
                        if (in_bc[ii] > best) {
                            best = in_bc[ii];
                            best_idx = ii;
                        }
                    }
                }
                out_bc[yo * Wo + xo] = best;
                am_bc[yo * Wo + xo] = bc * H * W + best_idx;
            }
        }
    }
    check_finite(*out, "maxpool2x2");

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = input;
        out->backward_fn = [o, x, argmax] {
            x->ensure_grad();
            for (std::size_t i = 0; i < o->grad.size(); ++i) {
                x->grad[static_cast<std::size_t>((*argmax)[i])] += o->grad[i];
            }
        };
    }
    return out;
}

TensorPtr upsample_nearest2x(const TensorPtr& input) {
    if (input->ndim() != 4) throw ConfigError("upsample_nearest2x expects [B,C,H,W]");
    const int B = input->dim(0), C = input->dim(1), H = input->dim(2), W = input->dim(3);
    auto out = make_node({B, C, 2 * H, 2 * W}, {input});
    const double* id = input->data.data();
    double* od = out->data.data();

    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const double* in_bc = id + bc * H * W;
        double* out_bc = od + bc * 4 * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double v = in_bc[y * W + x];
                double* r0 = out_bc + (2 * y) * 2 * W + 2 * x;
                double* r1 = r0 + 2 * W;
                r0[0] = v; r0[1] = v; r1[0] = v; r1[1] = v;
            }
        }
    }

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = input;
        out->backward_fn = [o, x, B, C, H, W] {
            x->ensure_grad();
            const double* go = o->grad.data();
            double* gi = x->grad.data();
            for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
                const double* go_bc = go + bc * 4 * H * W;
                double* gi_bc = gi + bc * H * W;
                for (int y = 0; y < H; ++y) {
                    for (int x2 = 0; x2 < W; ++x2) {
                        const double* r0 = go_bc + (2 * y) * 2 * W + 2 * x2;
                        const double* r1 = r0 + 2 * W;
                        gi_bc[y * W + x2] += r0[0] + r0[1] + r1[0] + r1[1];
                    }
                }
            }
        };
    }
    return out;
}

// ---- dense / activations ---------------------------------------------------

TensorPtr dense(const TensorPtr& input, const TensorPtr& weights, const TensorPtr& bias) {
    if (input->ndim() != 2 || weights->ndim() != 2 || bias->ndim() != 1) {
        throw ConfigError("dense expects input [B,N], weights [M,N], bias [M]");
    }
    const int B = input->dim(0), N = input->dim(1);
    const int M = weights->dim(0);
    if (weights->dim(1) != N || bias->dim(0) != M) throw ConfigError("dense shape mismatch");

    auto out = make_node({B, M}, {input, weights, bias});
    for (int b = 0; b < B; ++b) {
        for (int m = 0; m < M; ++m) {
            double acc = bias->data[m];
            for (int n = 0; n < N; ++n) acc += input->data[b * N + n] * weights->data[m * N + n];
            out->data[b * M + m] = acc;
        }
    }
    check_finite(*out, "dense");

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = input, w = weights, bt = bias;
        out->backward_fn = [o, x, w, bt, B, N, M] {
            const double* go = o->grad.data();
            if (x->requires_grad) {
                x->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int n = 0; n < N; ++n) {
                        double acc = 0.0;
                        for (int m = 0; m < M; ++m) acc += go[b * M + m] * w->data[m * N + n];
                        x->grad[b * N + n] += acc;
                    }
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (int m = 0; m < M; ++m)
                    for (int n = 0; n < N; ++n) {
                        double acc = 0.0;
                        for (int b = 0; b < B; ++b) acc += go[b * M + m] * x->data[b * N + n];
                        w->grad[m * N + n] += acc;
                    }
            }
            if (bt->requires_grad) {
                bt->ensure_grad();
                for (int m = 0; m < M; ++m) {
                    double acc = 0.0;
                    for (int b = 0; b < B; ++b) acc += go[b * M + m];
                    bt->grad[m] += acc;
                }
            }
        };
    }
    return out;
}

TensorPtr relu(const TensorPtr& t) {
    auto out = make_node(t->shape, {t});
    for (std::size_t i = 0; i < t->data.size(); ++i) out->data[i] = t->data[i] > 0 ? t->data[i] : 0.0;
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = t;
        out->backward_fn = [o, x] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->data.size(); ++i) {
                if (x->data[i] > 0) x->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

TensorPtr sigmoid(const TensorPtr& t) {
    auto out = make_node(t->shape, {t});
    for (std::size_t i = 0; i < t->data.size(); ++i) {
        const double z = t->data[i];
        if (z >= 0) {
            out->data[i] = 1.0 / (1.0 + std::exp(-z));
        } else {
            const double e = std::exp(z);
            out->data[i] = e / (1.0 + e);
        }
    }
    check_finite(*out, "sigmoid");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = t;
        out->backward_fn = [o, x] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->data.size(); ++i) {
                const double y = o->data[i];
                x->grad[i] += o->grad[i] * y * (1.0 - y);
            }
        };
    }
    return out;
}

TensorPtr softmax_lastdim(const TensorPtr& t) {
    if (t->ndim() < 1) throw ConfigError("softmax needs at least one axis");
    const int K = t->shape.back();
    const std::int64_t rows = t->numel() / K;
    auto out = make_node(t->shape, {t});
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = t->data.data() + r * K;
        double* o = out->data.data() + r * K;
        double mx = in[0];
        for (int i = 1; i < K; ++i) mx = std::max(mx, in[i]);
        double sum = 0.0;
        for (int i = 0; i < K; ++i) {
            o[i] = std::exp(in[i] - mx);
            sum += o[i];
        }
        for (int i = 0; i < K; ++i) o[i] /= sum;
    }
    check_finite(*out, "softmax");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = t;
        const int k = K;
        out->backward_fn = [o, x, k, rows] {
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* y = o->data.data() + r * k;
                const double* gy = o->grad.data() + r * k;
                double dot = 0.0;
                for (int i = 0; i < k; ++i) dot += gy[i] * y[i];
                for (int i = 0; i < k; ++i) x->grad[r * k + i] += y[i] * (gy[i] - dot);
            }
        };
    }
    return out;
}

// ---- elementwise -----------------------------------------------------------

static void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) throw ConfigError(std::string(op) + ": shape mismatch");
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "add");
    auto out = make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite(*out, "add");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb] {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += o->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "sub");
    auto out = make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite(*out, "sub");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb] {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += o->grad[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] -= o->grad[i];
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "mul");
    auto out = make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite(*out, "mul");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb] {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < pa->grad.size(); ++i)
                    pa->grad[i] += o->grad[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.size(); ++i)
                    pb->grad[i] += o->grad[i] * pa->data[i];
            }
        };
    }
    return out;
}

TensorPtr scale(const TensorPtr& t, double c) {
    auto out = make_node(t->shape, {t});
    for (std::size_t i = 0; i < t->data.size(); ++i) out->data[i] = c * t->data[i];
    check_finite(*out, "scale");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = t;
        out->backward_fn = [o, x, c] {
            x->ensure_grad();
            for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += c * o->grad[i];
        };
    }
    return out;
}

TensorPtr sum_all(const TensorPtr& t) {
    auto out = make_node({1}, {t});
    double acc = 0.0;
    for (double v : t->data) acc += v;
    out->data[0] = acc;
    check_finite(*out, "sum_all");
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr x = t;
        out->backward_fn = [o, x] {
            x->ensure_grad();
            const double g = o->grad[0];
            for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
        };
    }
    return out;
}

TensorPtr mean_all(const TensorPtr& t) {
    return scale(sum_all(t), 1.0 / static_cast<double>(t->numel()));
}

TensorPtr weighted_sum(const std::vector<TensorPtr>& inputs, const TensorPtr& coeffs) {
    if (inputs.empty()) throw ConfigError("weighted_sum needs at least one input");
    const int K = static_cast<int>(inputs.size());
    if (coeffs->numel() != K) throw ConfigError("weighted_sum: coefficient count mismatch");
    for (const auto& in : inputs) require_same_shape(in, inputs[0], "weighted_sum");

    std::vector<TensorPtr> parents = inputs;
    parents.push_back(coeffs);
    auto out = make_node(inputs[0]->shape, std::move(parents));
    const std::size_t n = out->data.size();
    for (int i = 0; i < K; ++i) {
        const double c = coeffs->data[static_cast<std::size_t>(i)];
        const double* xi = inputs[static_cast<std::size_t>(i)]->data.data();
        double* od = out->data.data();
        if (i == 0) {
            for (std::size_t j = 0; j < n; ++j) od[j] = c * xi[j];
        } else {
            for (std::size_t j = 0; j < n; ++j) od[j] += c * xi[j];
        }
    }
    check_finite(*out, "weighted_sum");

    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> xs = inputs;
        TensorPtr c = coeffs;
        out->backward_fn = [o, xs, c] {
            const double* go = o->grad.data();
            const std::size_t n2 = o->grad.size();
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (xs[i]->requires_grad) {
                    xs[i]->ensure_grad();
                    const double cv = c->data[i];
                    double* gx = xs[i]->grad.data();
                    for (std::size_t j = 0; j < n2; ++j) gx[j] += cv * go[j];
                }
            }
            if (c->requires_grad) {
                c->ensure_grad();
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    const double* xi = xs[i]->data.data();
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n2; ++j) acc += go[j] * xi[j];
                    c->grad[i] += acc;
                }
            }
        };
    }
    return out;
}

TensorPtr weight_stats(const std::vector<TensorPtr>& weights) {
    if (weights.empty()) throw ConfigError("weight_stats needs at least one tensor");
    const int K = static_cast<int>(weights.size());
    auto out = make_node({1, 2 * K}, std::vector<TensorPtr>(weights.begin(), weights.end()));
    std::vector<double> means(static_cast<std::size_t>(K)), stds(static_cast<std::size_t>(K));
    for (int i = 0; i < K; ++i) {
        const auto& w = weights[static_cast<std::size_t>(i)]->data;
        const double n = static_cast<double>(w.size());
        double mu = 0.0;
        for (double v : w) mu += v;
        mu /= n;
        double var = 0.0;
        for (double v : w) var += (v - mu) * (v - mu);
        var /= n;
        means[static_cast<std::size_t>(i)] = mu;
        stds[static_cast<std::size_t>(i)] = std::sqrt(var + 1e-12);
        out->data[static_cast<std::size_t>(2 * i)] = mu;
        out->data[static_cast<std::size_t>(2 * i + 1)] = stds[static_cast<std::size_t>(i)];
    }
    check_finite(*out, "weight_stats");

    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> ws = weights;
        out->backward_fn = [o, ws, means, stds] {
            for (std::size_t i = 0; i < ws.size(); ++i) {
                if (!ws[i]->requires_grad) continue;
                ws[i]->ensure_grad();
                const double g_mu = o->grad[2 * i];
                const double g_sd = o->grad[2 * i + 1];
                const double n = static_cast<double>(ws[i]->data.size());
                const double mu = means[i];
                const double sd = stds[i];
                for (std::size_t j = 0; j < ws[i]->data.size(); ++j) {
                    ws[i]->grad[j] += g_mu / n + g_sd * (ws[i]->data[j] - mu) / (n * sd);
                }
            }
        };
    }
    return out;
}

TensorPtr concat_channels(const std::vector<TensorPtr>& inputs) {
    if (inputs.empty()) throw ConfigError("concat_channels needs inputs");
    const int B = inputs[0]->dim(0), H = inputs[0]->dim(2), W = inputs[0]->dim(3);
    int C = 0;
    for (const auto& in : inputs) {
        if (in->ndim() != 4 || in->dim(0) != B || in->dim(2) != H || in->dim(3) != W) {
            throw ConfigError("concat_channels: B/H/W mismatch");
        }
        C += in->dim(1);
    }
    auto out = make_node({B, C, H, W}, std::vector<TensorPtr>(inputs.begin(), inputs.end()));
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
        std::int64_t coff = 0;
        for (const auto& in : inputs) {
            const int ci = in->dim(1);
            std::memcpy(out->data.data() + (static_cast<std::int64_t>(b) * C + coff) * plane,
                        in->data.data() + static_cast<std::int64_t>(b) * ci * plane,
                        static_cast<std::size_t>(ci * plane) * sizeof(double));
            coff += ci;
        }
    }

    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> xs = inputs;
        out->backward_fn = [o, xs, B, C, plane] {
            for (int b = 0; b < B; ++b) {
                std::int64_t coff = 0;
                for (const auto& x : xs) {
                    const int ci = x->dim(1);
                    if (x->requires_grad) {
                        x->ensure_grad();
                        const double* go =
                            o->grad.data() + (static_cast<std::int64_t>(b) * C + coff) * plane;
                        double* gx = x->grad.data() + static_cast<std::int64_t>(b) * ci * plane;
                        for (std::int64_t j = 0; j < ci * plane; ++j) gx[j] += go[j];
                    }
                    coff += ci;
                }
            }
        };
    }
    return out;
}

// ---- backward driver -------------------------------------------------------

void backward(const TensorPtr& root) {
    if (root->numel() != 1) throw ContractError("backward: root must be scalar");
    if (!root->requires_grad) throw ContractError("backward: root does not require grad");

    // iterative post-order DFS
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    for (Tensor* t : order) {
        if (!t->grad.empty()) check_finite_buf(t->grad, "backward gradients");
    }
}

// ---- Adam ------------------------------------------------------------------

AdamState::Moments& AdamState::moments_for(Tensor& param) {
    for (auto& [ptr, mom] : moments) {
        if (ptr == &param) return mom;
    }
    moments.emplace_back(&param, Moments{std::vector<double>(param.data.size(), 0.0),
                                         std::vector<double>(param.data.size(), 0.0)});
    return moments.back().second;
}

void AdamState::slice_state(Tensor& param, const std::vector<char>& keep) {
    for (auto& [ptr, mom] : moments) {
        if (ptr != &param) continue;
        std::vector<double> m2, v2;
        m2.reserve(mom.m.size());
        v2.reserve(mom.v.size());
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (keep[i]) {
                m2.push_back(mom.m[i]);
                v2.push_back(mom.v[i]);
            }
        }
        mom.m = std::move(m2);
        mom.v = std::move(v2);
        return;
    }
}

void AdamState::drop(Tensor& param) {
    for (auto it = moments.begin(); it != moments.end(); ++it) {
        if (it->first == &param) {
            moments.erase(it);
            return;
        }
    }
}

void quantize_f32(Tensor& t) {
    for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

void adam_step(const std::vector<TensorPtr>& params, AdamState& state) {
    for (const auto& p : params) {
        if (!p->grad.empty()) check_finite_buf(p->grad, "adam gradients");
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& p : params) {
        auto& mom = state.moments_for(*p);
        if (mom.m.size() != p->data.size()) {
            throw ContractError("adam: moment buffer does not match parameter shape");
        }
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double g = p->grad.empty() ? 0.0 : p->grad[i];
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            const double mh = mom.m[i] / bc1;
            const double vh = mom.v[i] / bc2;
            p->data[i] -= state.lr * mh / (std::sqrt(vh) + state.eps);
            // keep every value on the float32 grid so checkpoints are lossless
            p->data[i] = static_cast<double>(static_cast<float>(p->data[i]));
            mom.m[i] = static_cast<double>(static_cast<float>(mom.m[i]));
            mom.v[i] = static_cast<double>(static_cast<float>(mom.v[i]));
        }
    }
}

// ---- gradient checking -----------------------------------------------------

double finite_diff_check(const std::function<TensorPtr(const std::vector<TensorPtr>&)>& f,
                         const std::vector<TensorPtr>& inputs, double eps) {
    for (const auto& in : inputs) {
        in->requires_grad = true;
        in->zero_grad();
    }
    auto y = f(inputs);
    if (y->numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
    backward(y);

    std::vector<std::vector<double>> analytic;
    for (const auto& in : inputs) {
        in->ensure_grad();
        analytic.push_back(in->grad);
    }

    double max_err = 0.0;
    {
        GradGuard no_grad(false);
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            auto& in = inputs[t];
            for (std::size_t i = 0; i < in->data.size(); ++i) {
                const double saved = in->data[i];
                in->data[i] = saved + eps;
                const double yp = f(inputs)->data[0];
                in->data[i] = saved - eps;
                const double ym = f(inputs)->data[0];
                in->data[i] = saved;
                const double numeric = (yp - ym) / (2.0 * eps);
                const double a = analytic[t][i];
                const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
                max_err = std::max(max_err, err);
            }
        }
    }
    return max_err;
}

}  // namespace sphg
