#include <doctest.h>

#include <cmath>
#include <limits>

#include "sphg/tensor.hpp"
#include "sphg/threading.hpp"
#include "test_util.hpp"

using namespace sphg;
using namespace sphg_test;

TEST_CASE("tensor shape and data invariants") {
    auto t = Tensor::create({2, 3, 4, 5});
    CHECK(t->numel() == 120);
    CHECK_THROWS_AS(Tensor::create({2, 0}), ConfigError);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ConfigError);
}

TEST_CASE("conv2d identity kernel passes input through") {
    Rng rng(1);
    auto in = random_tensor({1, 1, 3, 3}, rng);
    auto w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    auto b = Tensor::zeros({1});
    auto out = conv2d(in, w, b, 1);
    CHECK(bit_equal(in, out));
}

TEST_CASE("conv2d dilation 2 taps offsets -2,0,+2 and has receptive field 5") {
    // one-hot input probes which taps reach the center output
    auto w = Tensor::from_data({1, 1, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 1});
    auto b = Tensor::zeros({1});
    ConvKernel k{w, b, 2, 1};
    CHECK(k.receptive_field() == 5);
    CHECK(k.padding() == 2);

    for (int off : {-2, 0, 2}) {
        auto in = Tensor::zeros({1, 1, 7, 7});
        in->at(0, 0, 3 + off, 3 + off) = 1.0;
        auto out = conv2d(in, k);
        CHECK(out->at(0, 0, 3, 3) == doctest::Approx(1.0));  // tapped
    }
    for (int off : {-1, 1}) {
        auto in = Tensor::zeros({1, 1, 7, 7});
        in->at(0, 0, 3 + off, 3 + off) = 1.0;
        auto out = conv2d(in, k);
        CHECK(out->at(0, 0, 3, 3) == doctest::Approx(0.0));  // between taps
    }
}

TEST_CASE("conv2d matches the naive nested-loop oracle") {
    Rng rng(7);
    auto in = random_tensor({2, 3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng, 0.5);
    auto b = random_tensor({4}, rng, 0.1);
    for (int dil : {1, 2, 3}) {
        auto out = conv2d(in, w, b, dil);
        auto expect = naive_conv2d(in, w, b, dil);
        CHECK(out->shape == expect->shape);  // same padding preserves H,W
        CHECK(max_abs_diff(out, expect) < 1e-10);
    }
}

TEST_CASE("conv2d is deterministic across thread counts") {
    Rng rng(11);
    auto in = random_tensor({3, 4, 16, 16}, rng);
    auto w = random_tensor({5, 4, 3, 3}, rng, 0.5);
    auto b = random_tensor({5}, rng, 0.1);
    set_threads(1);
    auto a = conv2d(in, w, b, 2);
    set_threads(4);
    auto c = conv2d(in, w, b, 2);
    set_threads(1);
    CHECK(bit_equal(a, c));
}

TEST_CASE("conv2d rejects bad shapes") {
    Rng rng(3);
    auto in = random_tensor({1, 2, 4, 4}, rng);
    auto w = random_tensor({1, 3, 3, 3}, rng);  // wrong C_in
    auto b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(in, w, b, 1), ConfigError);
}

TEST_CASE("conv2d reports non-finite output as a numeric error") {
    auto in = Tensor::from_data({1, 1, 2, 2}, {1e308, 1e308, 1e308, 1e308});
    auto w = Tensor::from_data({1, 1, 1, 1}, {1e10});
    auto b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(in, w, b, 1), NumericError);
}

TEST_CASE("maxpool2x2 window max and tie-break") {
    auto in = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto out = maxpool2x2(in);
    CHECK(out->data[0] == 4.0);

    // constant input: gradient routes to the first element of each window
    auto c = Tensor::full({1, 1, 4, 4}, 3.5, true);
    auto p = maxpool2x2(c);
    for (double v : p->data) CHECK(v == 3.5);
    backward(sum_all(p));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const double expect = (y % 2 == 0 && x % 2 == 0) ? 1.0 : 0.0;
            CHECK(c->grad[static_cast<std::size_t>(y * 4 + x)] == expect);
        }

    CHECK_THROWS_AS(maxpool2x2(Tensor::zeros({1, 1, 3, 4})), ConfigError);
}

TEST_CASE("maxpool2x2 matches a brute-force window scan") {
    Rng rng(13);
    auto in = random_tensor({1, 1, 4, 4}, rng);
    auto out = maxpool2x2(in);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            double best = -1e300;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    best = std::max(best, in->at(0, 0, 2 * y + dy, 2 * x + dx));
            CHECK(out->at(0, 0, y, x) == best);
        }
}

TEST_CASE("upsample_nearest2x replicates and inverts under maxpool") {
    auto in = Tensor::from_data({1, 1, 1, 1}, {5.0});
    auto out = upsample_nearest2x(in);
    for (double v : out->data) CHECK(v == 5.0);

    Rng rng(17);
    auto t = random_tensor({2, 3, 5, 6}, rng);
    auto round_trip = maxpool2x2(upsample_nearest2x(t));
    CHECK(bit_equal(t, round_trip));

    // upsample . maxpool is the identity on upsampled tensors
    auto up = upsample_nearest2x(t);
    CHECK(bit_equal(up, upsample_nearest2x(maxpool2x2(up))));
}

TEST_CASE("dense identity, zero weights, and matmul oracle") {
    auto x = Tensor::from_data({1, 3}, {1, 2, 3});
    auto wi = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto b0 = Tensor::zeros({3});
    CHECK(bit_equal(dense(x, wi, b0), x));

    auto wz = Tensor::zeros({2, 3});
    auto bb = Tensor::from_data({2}, {4, 5});
    auto out = dense(x, wz, bb);
    CHECK(out->data[0] == 4.0);
    CHECK(out->data[1] == 5.0);

    Rng rng(19);
    auto xr = random_tensor({2, 3}, rng);
    auto wr = random_tensor({4, 3}, rng);
    auto br = random_tensor({4}, rng);
    CHECK(max_abs_diff(dense(xr, wr, br), naive_dense(xr, wr, br)) < 1e-12);
}

TEST_CASE("activations") {
    auto r = relu(Tensor::from_data({2}, {-1, 2}));
    CHECK(r->data[0] == 0.0);
    CHECK(r->data[1] == 2.0);

    auto s0 = softmax_lastdim(Tensor::from_data({1, 2}, {0, 0}));
    CHECK(s0->data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s0->data[1] == doctest::Approx(0.5).epsilon(1e-12));

    // direct exp-normalize oracle
    auto s = softmax_lastdim(Tensor::from_data({1, 3}, {1, 2, 3}));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(std::abs(s->data[0] - std::exp(1.0) / z) < 1e-12);
    CHECK(std::abs(s->data[1] - std::exp(2.0) / z) < 1e-12);
    CHECK(std::abs(s->data[2] - std::exp(3.0) / z) < 1e-12);

    Rng rng(23);
    auto rows = softmax_lastdim(random_tensor({64, 5}, rng, 3.0));
    for (int r2 = 0; r2 < 64; ++r2) {
        double sum = 0.0;
        for (int k = 0; k < 5; ++k) sum += rows->data[static_cast<std::size_t>(r2 * 5 + k)];
        CHECK(std::abs(sum - 1.0) < 1e-9);
        for (int k = 0; k < 5; ++k) CHECK(rows->data[static_cast<std::size_t>(r2 * 5 + k)] > 0.0);
    }

    auto sg = sigmoid(Tensor::from_data({3}, {-800, 0, 800}));
    CHECK(sg->data[0] >= 0.0);
    CHECK(sg->data[1] == doctest::Approx(0.5));
    CHECK(sg->data[2] <= 1.0);
}

TEST_CASE("adam: zero gradient leaves fresh parameters unchanged") {
    auto p = Tensor::from_data({2}, {1.0, -2.0}, true);
    p->ensure_grad();
    AdamState st;
    adam_step({p}, st);
    CHECK(p->data[0] == 1.0);
    CHECK(p->data[1] == -2.0);
    CHECK(st.step == 1);
}

TEST_CASE("adam: first step with constant gradient is about -lr (hand-evaluated)") {
    // m_hat = g, v_hat = g^2  =>  step = -lr * g/(|g|+eps)
    auto p = Tensor::from_data({1}, {0.0}, true);
    p->ensure_grad();
    p->grad[0] = 1.0;
    AdamState st;
    adam_step({p}, st);
    const double expect = -1e-3 * 1.0 / (1.0 + 1e-8);
    CHECK(p->data[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("adam: +g then -g matches an independent reference and returns near start") {
    auto p = Tensor::from_data({1}, {0.25}, true);
    p->ensure_grad();
    AdamState st;
    st.lr = 1e-3;

    // reference recurrence, written out independently
    double m = 0, v = 0, x = 0.25;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 1e-3;
    const double grads[2] = {0.7, -0.7};
    for (int t = 1; t <= 2; ++t) {
        const double g = grads[t - 1];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        x -= lr * mh / (std::sqrt(vh) + eps);
        x = static_cast<double>(static_cast<float>(x));
    }

    p->grad[0] = 0.7;
    adam_step({p}, st);
    p->grad[0] = -0.7;
    adam_step({p}, st);
    CHECK(p->data[0] == doctest::Approx(x).epsilon(1e-9));
    CHECK(std::abs(p->data[0] - 0.25) <= st.lr);  // near start
}

TEST_CASE("adam aborts on non-finite gradients") {
    auto p = Tensor::from_data({1}, {1.0}, true);
    p->ensure_grad();
    p->grad[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState st;
    CHECK_THROWS_AS(adam_step({p}, st), NumericError);
    CHECK(p->data[0] == 1.0);  // untouched
}

TEST_CASE("finite differences: linear op is exact, conv and friends < 1e-4") {
    Rng rng(29);

    SUBCASE("linear map is exact to machine precision") {
        auto x = random_tensor({2, 3}, rng);
        const double err = finite_diff_check(
            [](const std::vector<TensorPtr>& in) { return sum_all(scale(in[0], 3.0)); }, {x});
        CHECK(err < 1e-9);
    }

    SUBCASE("conv2d with dilation 2") {
        auto x = random_tensor({1, 2, 6, 6}, rng, 0.5);
        auto w = random_tensor({2, 2, 3, 3}, rng, 0.5);
        auto b = random_tensor({2}, rng, 0.1);
        const double err = finite_diff_check(
            [](const std::vector<TensorPtr>& in) {
                return sum_all(mul(conv2d(in[0], in[1], in[2], 2), conv2d(in[0], in[1], in[2], 2)));
            },
            {x, w, b});
        CHECK(err < 1e-4);
    }

    SUBCASE("conv2d stride 2") {
        auto x = random_tensor({1, 1, 6, 6}, rng, 0.5);
        auto w = random_tensor({2, 1, 3, 3}, rng, 0.5);
        auto b = random_tensor({2}, rng, 0.1);
        const double err = finite_diff_check(
            [](const std::vector<TensorPtr>& in) {
                return sum_all(conv2d(in[0], in[1], in[2], 1, 2));
            },
            {x, w, b});
        CHECK(err < 1e-4);
    }

    SUBCASE("maxpool, upsample, dense, activations") {
        auto x = random_tensor({1, 2, 4, 4}, rng);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      return sum_all(mul(maxpool2x2(in[0]), maxpool2x2(in[0])));
                  },
                  {x}) < 1e-4);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      return sum_all(mul(upsample_nearest2x(in[0]), upsample_nearest2x(in[0])));
                  },
                  {x}) < 1e-4);

        auto xd = random_tensor({2, 3}, rng);
        auto wd = random_tensor({4, 3}, rng);
        auto bd = random_tensor({4}, rng);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      return sum_all(sigmoid(dense(in[0], in[1], in[2])));
                  },
                  {xd, wd, bd}) < 1e-4);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      return sum_all(mul(softmax_lastdim(in[0]), in[0]));
                  },
                  {xd}) < 1e-4);
        // relu probed away from the kink
        auto xr = Tensor::from_data({4}, {-1.5, -0.3, 0.4, 2.0});
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) { return sum_all(mul(relu(in[0]), in[0])); },
                  {xr}) < 1e-4);
    }

    SUBCASE("weighted_sum and weight_stats") {
        auto a = random_tensor({1, 2, 4, 4}, rng);
        auto b2 = random_tensor({1, 2, 4, 4}, rng);
        auto c = random_tensor({1, 2}, rng);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      auto ws = weighted_sum({in[0], in[1]}, in[2]);
                      return sum_all(mul(ws, ws));
                  },
                  {a, b2, c}) < 1e-4);

        auto w1 = random_tensor({2, 2, 3, 3}, rng);
        auto w2 = random_tensor({2, 2, 5, 5}, rng);
        CHECK(finite_diff_check(
                  [](const std::vector<TensorPtr>& in) {
                      auto st = weight_stats({in[0], in[1]});
                      return sum_all(mul(st, st));
                  },
                  {w1, w2}) < 1e-4);
    }
}

TEST_CASE("weighted_sum matches independently computed combination") {
    Rng rng(31);
    auto a = random_tensor({1, 2, 4, 4}, rng);
    auto b = random_tensor({1, 2, 4, 4}, rng);
    auto c = Tensor::from_data({2}, {0.3, -1.2});
    auto out = weighted_sum({a, b}, c);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        CHECK(out->data[i] == doctest::Approx(0.3 * a->data[i] - 1.2 * b->data[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward accumulates over shared consumers") {
    auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
    auto y = add(x, x);  // dy/dx = 2
    backward(sum_all(y));
    CHECK(x->grad[0] == 2.0);
    CHECK(x->grad[1] == 2.0);
}

TEST_CASE("quantize_f32 and detached") {
    auto t = Tensor::from_data({1}, {0.1});
    quantize_f32(*t);
    CHECK(t->data[0] == static_cast<double>(0.1f));
    auto d = t->detached();
    CHECK(d->data == t->data);
    CHECK_FALSE(d->requires_grad);
}
