#pragma once

// Dense tensor with reverse-mode automatic differentiation.
//
// Tensors are shared_ptr graph nodes; each op returns a fresh node whose
// backward_fn scatters the node's grad into its parents. backward() walks the
// graph in reverse topological order. Values are 64-bit floats throughout;
// every op output (and every grad after backward) is checked for NaN/Inf.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "sphg/common.hpp"

namespace sphg {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;

    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;  // null for leaves

    static TensorPtr create(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr from_data(std::vector<int> shape, std::vector<double> data,
                               bool requires_grad = false);
    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
    static TensorPtr randn(std::vector<int> shape, Rng& rng, double stddev,
                           bool requires_grad = false);

    std::int64_t numel() const;
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 4-d accessor for [B,C,H,W] tensors
    double& at(int b, int c, int y, int x);
    double at(int b, int c, int y, int x) const;

    void ensure_grad();   // allocate + zero grad buffer
    void zero_grad();
    bool is_leaf() const { return !backward_fn; }

    // Detached copy of the values (no graph, no grad).
    TensorPtr detached() const;
};

// When false, ops skip graph construction and grad allocation (inference mode).
bool grad_enabled();
struct GradGuard {
    explicit GradGuard(bool enable);
    ~GradGuard();
    bool prev;
};

// Builds a fresh op node: requires_grad and parent edges are set only when
// grad mode is on and some parent needs gradients. Custom fused ops
// (e.g. the focal loss) use this and install their own backward_fn.
TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents);

// Throws NumericError if any value is non-finite. Applied to every op output.
void check_finite(const Tensor& t, const char* what);

// ---- operator set ----------------------------------------------------------

// Convolution kernel: "same" zero padding, pad = dilation*(k-1)/2, k odd.
// Receptive field = k + (k-1)*(dilation-1).
struct ConvKernel {
    TensorPtr weights;  // [C_out, C_in, k, k]
    TensorPtr bias;     // [C_out]
    int dilation = 1;
    int stride = 1;

    int k() const { return weights->dim(2); }
    int c_out() const { return weights->dim(0); }
    int c_in() const { return weights->dim(1); }
    int receptive_field() const { return k() + (k() - 1) * (dilation - 1); }
    int padding() const { return dilation * (k() - 1) / 2; }

    static ConvKernel make(int c_out, int c_in, int k, int dilation, Rng& rng);
};

TensorPtr conv2d(const TensorPtr& input, const ConvKernel& kernel);
TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weights, const TensorPtr& bias,
                 int dilation, int stride = 1);

TensorPtr maxpool2x2(const TensorPtr& input);
TensorPtr upsample_nearest2x(const TensorPtr& input);

// input [B,N] x weights [M,N] + bias [M] -> [B,M]
TensorPtr dense(const TensorPtr& input, const TensorPtr& weights, const TensorPtr& bias);

TensorPtr relu(const TensorPtr& t);       // subgradient at 0 is 0
TensorPtr sigmoid(const TensorPtr& t);
TensorPtr softmax_lastdim(const TensorPtr& t);  // rows sum to 1

TensorPtr add(const TensorPtr& a, const TensorPtr& b);        // same shape
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);        // elementwise
TensorPtr scale(const TensorPtr& t, double c);
TensorPtr sum_all(const TensorPtr& t);    // -> [1]
TensorPtr mean_all(const TensorPtr& t);   // -> [1]

// out = sum_i coeffs[i] * inputs[i]; coeffs is a [1,K] or [K] tensor.
TensorPtr weighted_sum(const std::vector<TensorPtr>& inputs, const TensorPtr& coeffs);

// Per-candidate weight statistics, interleaved (mean_0, std_0, mean_1, std_1, ...)
// as a [1, 2K] row. Differentiable into the weights (population std, +1e-12 in
// the sqrt so identical weights stay differentiable).
TensorPtr weight_stats(const std::vector<TensorPtr>& weights);

// Concatenate along the channel axis; inputs share B,H,W.
TensorPtr concat_channels(const std::vector<TensorPtr>& inputs);

// ---- autodiff driver -------------------------------------------------------

// Seeds root->grad with 1 (root must be scalar) and back-propagates.
void backward(const TensorPtr& root);

// ---- Adam ------------------------------------------------------------------

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;

    struct Moments {
        std::vector<double> m, v;
    };
    // Keyed by parameter identity; moments follow the parameter through
    // in-place reshapes (pruning) via slice_state.
    std::vector<std::pair<Tensor*, Moments>> moments;

    Moments& moments_for(Tensor& param);
    // Keep only the flat indices marked true (used when channels are pruned).
    void slice_state(Tensor& param, const std::vector<char>& keep);
    void drop(Tensor& param);
    void clear() { moments.clear(); step = 0; }
};

// One Adam update over params (reads param->grad). Parameters and moments are
// rounded to the nearest float32 value after the update so a checkpoint's
// 32-bit blobs are lossless and resumed runs replay exactly.
// Throws NumericError on non-finite gradients (step aborted, params untouched).
void adam_step(const std::vector<TensorPtr>& params, AdamState& state);

// Rounds values to float32 grid (used at init so fresh params are exactly
// representable in checkpoints).
void quantize_f32(Tensor& t);

// ---- gradient checking -----------------------------------------------------

// f maps inputs to a scalar tensor. Returns the max over all input coordinates
// of |analytic - central difference| / (|analytic| + |central| + 1e-12).
double finite_diff_check(const std::function<TensorPtr(const std::vector<TensorPtr>&)>& f,
                         const std::vector<TensorPtr>& inputs, double eps = 1e-5);

}  // namespace sphg
