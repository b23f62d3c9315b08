#include <doctest.h>

#include <cmath>

#include "sphg/network.hpp"
#include "test_util.hpp"

using namespace sphg;
using namespace sphg_test;

namespace {

NetworkConfig small_cfg(int input, int depth, int channels, int stacks = 1) {
    NetworkConfig c;
    c.input_size = input;
    c.depth = depth;
    c.base_channels = channels;
    c.stack_count = stacks;
    c.candidate_dilations = {1, 2};
    return c;
}

int count_kind(const NetworkGraph& net, LayerKind k) {
    int n = 0;
    for (const auto& l : net.layers) n += l.kind == k ? 1 : 0;
    return n;
}

void zero_all_params(NetworkGraph& net) {
    for (auto& p : net.parameters()) std::fill(p->data.begin(), p->data.end(), 0.0);
}

}  // namespace

TEST_CASE("depth-1 single-stack topology: 1 pool, 1 upsample, 1 skip-add, 3 heads") {
    Rng rng(1);
    auto net = build_network(small_cfg(16, 1, 4), rng);
    CHECK(count_kind(net, LayerKind::Pool) == 1);
    CHECK(count_kind(net, LayerKind::Upsample) == 1);
    CHECK(count_kind(net, LayerKind::SkipAdd) == 1);
    CHECK(count_kind(net, LayerKind::Head) == 3);
    CHECK(net.skip_edges.size() == 1);
}

TEST_CASE("deepest feature sizes: 224/depth-4 gives 14, 64/depth-3 gives 8") {
    Rng rng(2);
    auto paper = build_network(small_cfg(224, 4, 2), rng);
    int deepest_paper = 224;
    for (const auto& l : paper.layers) deepest_paper = std::min(deepest_paper, l.feature_size);
    CHECK(deepest_paper == 14);

    auto desk = build_network(small_cfg(64, 3, 2), rng);
    int deepest_desk = 64;
    for (const auto& l : desk.layers) deepest_desk = std::min(deepest_desk, l.feature_size);
    CHECK(deepest_desk == 8);
}

TEST_CASE("indivisible or too-small input sizes are configuration errors") {
    Rng rng(3);
    CHECK_THROWS_AS(build_network(small_cfg(66, 3, 4), rng), ConfigError);   // 66/8 not integral
    CHECK_THROWS_AS(build_network(small_cfg(16, 3, 4), rng), ConfigError);   // deepest would be 2
}

TEST_CASE("zero-weight network outputs sigmoid(bias) everywhere") {
    Rng rng(4);
    auto net = build_network(small_cfg(16, 1, 4), rng);
    zero_all_params(net);
    // put a known bias on the first head
    for (auto& l : net.layers) {
        if (l.kind == LayerKind::Head) {
            l.conv_b->data[0] = 0.4;
            break;
        }
    }
    auto img = random_tensor({2, 1, 16, 16}, rng, 0.3);
    for (auto& v : img->data) v = std::abs(v);
    auto fr = forward(net, img);
    const double expect = 1.0 / (1.0 + std::exp(-0.4));
    for (double v : fr.stacks[0].corners->data) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
    for (double v : fr.stacks[0].entry_lines->data) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("output heatmaps keep the input spatial size for every legal config") {
    Rng rng(5);
    for (const auto& [size, depth] : std::vector<std::pair<int, int>>{{16, 1}, {32, 2}, {64, 3}}) {
        auto net = build_network(small_cfg(size, depth, 3), rng);
        auto img = random_tensor({1, 1, size, size}, rng, 0.2);
        auto fr = forward(net, img);
        CHECK(fr.stacks.size() == 1);
        for (const auto* hm :
             {&fr.stacks[0].corners, &fr.stacks[0].entry_lines, &fr.stacks[0].separating_lines}) {
            CHECK((*hm)->dim(2) == size);
            CHECK((*hm)->dim(3) == size);
            CHECK((*hm)->dim(1) == 1);
        }
    }
}

TEST_CASE("skip connections are live paths: perturbing a skip producer changes the output") {
    Rng rng(6);
    auto net = build_network(small_cfg(16, 2, 4), rng);
    auto img = random_tensor({1, 1, 16, 16}, rng, 0.3);
    auto before = forward(net, img).stacks[0].corners->detached();

    // perturb the first skip producer's bias (it feeds the decoder directly)
    const int producer = net.skip_edges[0].first;
    auto& layer = net.layers[static_cast<std::size_t>(producer)];
    REQUIRE(layer.kind == LayerKind::ConvBlock);
    for (auto& c : layer.select->candidates) {
        for (auto& v : c.bias->data) v += 1.0;
    }
    auto after = forward(net, img).stacks[0].corners;
    CHECK(max_abs_diff(before, after) > 1e-6);
}

TEST_CASE("two-stack network: intermediate supervision triples") {
    Rng rng(7);
    auto net1 = build_network(small_cfg(16, 1, 4, 1), rng);
    auto img = random_tensor({1, 1, 16, 16}, rng, 0.3);
    auto fr1 = forward(net1, img);
    CHECK(fr1.stacks.size() == 1);
    // with S=1, the intermediate triple is the final triple
    CHECK(&intermediate_heads(fr1, 0) == &fr1.stacks[0]);
    CHECK_THROWS_AS(intermediate_heads(fr1, 1), ContractError);

    auto net2 = build_network(small_cfg(16, 1, 4, 2), rng);
    CHECK(net2.head_ids.size() == 2);
    CHECK(count_kind(net2, LayerKind::Head) == 6);
    CHECK(count_kind(net2, LayerKind::Remap) == 1);
    auto fr2 = forward(net2, img);
    CHECK(fr2.stacks.size() == 2);

    // zero the second stack: final heads go constant while intermediates vary
    for (auto& l : net2.layers) {
        if (l.id <= net2.head_ids[0][2]) continue;  // first stack stays intact
        if (l.kind == LayerKind::ConvBlock) {
            for (auto& c : l.select->candidates) {
                std::fill(c.weights->data.begin(), c.weights->data.end(), 0.0);
                std::fill(c.bias->data.begin(), c.bias->data.end(), 0.0);
            }
        } else if (l.kind == LayerKind::Head || l.kind == LayerKind::Remap) {
            std::fill(l.conv_w->data.begin(), l.conv_w->data.end(), 0.0);
            std::fill(l.conv_b->data.begin(), l.conv_b->data.end(), 0.0);
        }
    }
    auto fr3 = forward(net2, img);
    double spread_final = 0.0, spread_mid = 0.0;
    auto spread = [](const TensorPtr& t) {
        double lo = t->data[0], hi = t->data[0];
        for (double v : t->data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        return hi - lo;
    };
    spread_final = spread(fr3.stacks[1].corners);
    spread_mid = spread(fr3.stacks[0].corners);
    CHECK(spread_final == doctest::Approx(0.0));
    CHECK(spread_mid > 1e-9);
}

TEST_CASE("with one stack the network has exactly 3 head layers") {
    Rng rng(8);
    auto net = build_network(small_cfg(32, 2, 4, 1), rng);
    CHECK(count_kind(net, LayerKind::Head) == 3);
}

TEST_CASE("kernel-size policy: large feature maps get enlarged kernels, small ones dilation") {
    auto big = candidates_for_feature_size(64, 3, {1, 2}, 28);
    REQUIRE(big.size() == 2);
    CHECK(big[0].k == 3);
    CHECK(big[0].dilation == 1);
    CHECK(big[1].k == 5);
    CHECK(big[1].dilation == 1);
    CHECK(big[1].receptive_field() == 5);

    auto small = candidates_for_feature_size(16, 3, {1, 2}, 28);
    REQUIRE(small.size() == 2);
    CHECK(small[1].k == 3);
    CHECK(small[1].dilation == 2);
    CHECK(small[1].receptive_field() == 5);

    Rng rng(9);
    auto net = build_network(small_cfg(64, 3, 2), rng);
    for (const auto& l : net.layers) {
        if (l.kind != LayerKind::ConvBlock) continue;
        for (std::size_t i = 0; i < l.select->candidates.size(); ++i) {
            const auto& c = l.select->candidates[i];
            if (l.feature_size >= 28) {
                CHECK(c.dilation == 1);
            } else {
                CHECK(c.weights->dim(2) == 3);
            }
        }
    }
}

TEST_CASE("forward validates the input shape") {
    Rng rng(10);
    auto net = build_network(small_cfg(16, 1, 2), rng);
    CHECK_THROWS_AS(forward(net, Tensor::zeros({1, 1, 8, 8})), ConfigError);
    CHECK_THROWS_AS(forward(net, Tensor::zeros({1, 2, 16, 16})), ConfigError);
}
