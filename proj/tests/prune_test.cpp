#include <doctest.h>

#include <cmath>
#include <set>

#include "sphg/pipeline.hpp"
#include "sphg/prune.hpp"
#include "test_util.hpp"

using namespace sphg;
using namespace sphg_test;

namespace {

NetworkConfig cfg_for(int input, int depth, int channels) {
    NetworkConfig c;
    c.input_size = input;
    c.depth = depth;
    c.base_channels = channels;
    c.candidate_dilations = {1};  // single candidate: committed at build
    return c;
}

NetworkGraph committed_net(int input, int depth, int channels, std::uint64_t seed) {
    Rng rng(seed);
    return build_network(cfg_for(input, depth, channels), rng);
}

// set each output channel's weight vector to [norm, 0, 0, ...] so the L2 norm
// is exact by construction
void set_channel_norms(LayerSpec& layer, const std::vector<double>& norms) {
    auto w = layer.select->candidates[0].weights;
    std::fill(w->data.begin(), w->data.end(), 0.0);
    const std::int64_t per = w->numel() / w->dim(0);
    for (std::size_t c = 0; c < norms.size(); ++c) {
        w->data[c * static_cast<std::size_t>(per)] = norms[c];
    }
}

int conv_block_id(const NetworkGraph& net, int nth) {
    int seen = 0;
    for (const auto& l : net.layers) {
        if (l.kind == LayerKind::ConvBlock) {
            if (seen == nth) return l.id;
            ++seen;
        }
    }
    return -1;
}

}  // namespace

TEST_CASE("Eq.5 channel contributions") {
    auto net = committed_net(16, 1, 8, 5);

    SUBCASE("equal norms give 1/N each") {
        const int id = conv_block_id(net, 1);
        set_channel_norms(net.layers[static_cast<std::size_t>(id)], std::vector<double>(8, 0.7));
        const auto c = channel_contribution(net, id);
        for (double v : c) CHECK(v == doctest::Approx(1.0 / 8).epsilon(1e-12));
        double sum = 0.0;
        for (double v : c) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("norms [0, ln 2] give exactly [1/3, 2/3]") {
        auto net2 = committed_net(16, 1, 2, 6);
        const int id = conv_block_id(net2, 1);
        set_channel_norms(net2.layers[static_cast<std::size_t>(id)], {0.0, std::log(2.0)});
        const auto c = channel_contribution(net2, id);
        CHECK(std::abs(c[0] - 1.0 / 3.0) < 1e-12);
        CHECK(std::abs(c[1] - 2.0 / 3.0) < 1e-12);
    }

    SUBCASE("an all-zero channel holds the layer minimum") {
        const int id = conv_block_id(net, 1);
        auto& layer = net.layers[static_cast<std::size_t>(id)];
        set_channel_norms(layer, {0.4, 0.9, 0.0, 1.3, 0.8, 0.7, 1.0, 0.6});
        const auto c = channel_contribution(net, id);
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (i != 2) CHECK(c[2] < c[i]);
        }
    }

    SUBCASE("contributions sum to 1 on every layer of a random net") {
        for (const auto& l : net.layers) {
            if (l.kind != LayerKind::ConvBlock) continue;
            const auto c = channel_contribution(net, l.id);
            double sum = 0.0;
            for (double v : c) sum += v;
            CHECK(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("group construction") {
    SUBCASE("depth-1 hourglass: encoder channels group with the decoder side of their skip") {
        auto net = committed_net(16, 1, 4, 7);
        const auto groups = build_prune_groups(net);
        // expected families: stem singletons (not prunable), {e0, bottleneck} pairs, d0 singletons
        int pairs = 0, singles = 0, fixed = 0;
        for (const auto& g : groups) {
            if (!g.prunable) {
                ++fixed;
                continue;
            }
            if (g.members.size() == 2) ++pairs;
            if (g.members.size() == 1) ++singles;
        }
        CHECK(pairs == 4);
        CHECK(singles == 4);
        CHECK(fixed == 4);  // stem channels

        // the paired groups tie the skip producer (e0) to the bottleneck output
        const int e0 = conv_block_id(net, 1);
        const int bott = conv_block_id(net, 2);
        for (const auto& g : groups) {
            if (g.members.size() == 2) {
                CHECK(g.members[0].first == e0);
                CHECK(g.members[1].first == bott);
                CHECK(g.members[0].second == g.members[1].second);
            }
        }
    }

    SUBCASE("every prunable channel appears in exactly one group") {
        auto net = committed_net(32, 2, 6, 8);
        const auto groups = build_prune_groups(net);
        std::set<std::pair<int, int>> seen;
        for (const auto& g : groups) {
            for (const auto& m : g.members) {
                CHECK(seen.insert(m).second);  // no duplicates
            }
        }
        std::size_t expected = 0;
        for (const auto& l : net.layers) {
            if (l.kind == LayerKind::ConvBlock || l.kind == LayerKind::Remap) {
                expected += static_cast<std::size_t>(l.c_out);
            }
        }
        CHECK(seen.size() == expected);
    }

    SUBCASE("group score sums member contributions") {
        auto net = committed_net(16, 1, 2, 9);
        // fabricate contributions 0.03/0.97 in e0 and 0.04/0.96 in bottleneck;
        // exp(a)/(exp(a)+exp(b)) = c when a-b = log(c/(1-c)), norms kept >= 0
        const int e0 = conv_block_id(net, 1);
        const int bott = conv_block_id(net, 2);
        set_channel_norms(net.layers[static_cast<std::size_t>(e0)],
                          {4.0 + std::log(0.03 / 0.97), 4.0});
        set_channel_norms(net.layers[static_cast<std::size_t>(bott)],
                          {4.0 + std::log(0.04 / 0.96), 4.0});
        const auto groups = build_prune_groups(net);
        bool found = false;
        for (const auto& g : groups) {
            if (g.members.size() == 2 && g.members[0].second == 0) {
                CHECK(g.score == doctest::Approx(0.07).epsilon(1e-9));
                found = true;
            }
        }
        CHECK(found);
    }

    SUBCASE("chain consistency: uncommitted network is rejected") {
        Rng rng(10);
        NetworkConfig c = cfg_for(16, 1, 4);
        c.candidate_dilations = {1, 2};
        auto net = build_network(c, rng);
        CHECK_THROWS_AS(build_prune_groups(net), ContractError);
        CHECK_THROWS_AS(channel_contribution(net, conv_block_id(net, 0)), ContractError);
    }
}

TEST_CASE("prune_step rules") {
    SUBCASE("uniform norms: rule (a) silent, rule (b) removes exactly 5 by tie-break") {
        auto net = committed_net(16, 1, 8, 11);
        for (auto& l : net.layers) {
            if (l.kind == LayerKind::ConvBlock) {
                set_channel_norms(l, std::vector<double>(static_cast<std::size_t>(l.c_out), 0.5));
            }
        }
        const auto groups = build_prune_groups(net);
        PruneOptions opt;
        const auto report = prune_step(net, groups, opt, nullptr);
        CHECK(report.rule_a_groups == 0);
        CHECK(report.rule_b_groups == 5);
        CHECK(report.groups_removed == 5);
        // with uniform norms, the smallest groups are the d0 singletons (1/8
        // each vs 2/8 for the skip pairs); ties within them resolve to the
        // lowest channel index
        const int d0 = conv_block_id(net, 3);
        std::set<std::pair<int, int>> removed(report.removed.begin(), report.removed.end());
        for (int ch = 0; ch < 5; ++ch) {
            CHECK(removed.count({d0, ch}) == 1);
        }
        CHECK(net.layers[static_cast<std::size_t>(d0)].c_out == 3);
    }

    SUBCASE("a channel below 1% layer contribution is removed by rule (a)") {
        auto net = committed_net(16, 1, 64, 12);
        const int d0 = conv_block_id(net, 3);  // singleton family
        auto& layer = net.layers[static_cast<std::size_t>(d0)];
        // contribution of channel 0 = 1/(1 + 63 e^n) = 0.005  =>  n = ln(199/63)
        std::vector<double> norms(64, std::log(199.0 / 63.0));
        norms[0] = 0.0;
        set_channel_norms(layer, norms);
        const auto contrib = channel_contribution(net, d0);
        CHECK(contrib[0] == doctest::Approx(0.005).epsilon(1e-9));

        const auto groups = build_prune_groups(net);
        PruneOptions opt;
        opt.global_count = 0;  // isolate rule (a)
        const auto report = prune_step(net, groups, opt, nullptr);
        CHECK(report.rule_a_groups == 1);
        bool removed_it = false;
        for (const auto& [l, c] : report.removed) removed_it |= (l == d0 && c == 0);
        CHECK(removed_it);
    }

    SUBCASE("layers never empty: the guard skips and takes the next smallest") {
        auto net = committed_net(16, 1, 2, 13);
        const auto groups = build_prune_groups(net);
        PruneOptions opt;
        opt.global_count = 100;  // try to prune everything
        const auto report = prune_step(net, groups, opt, nullptr);
        for (const auto& l : net.layers) {
            if (l.kind == LayerKind::ConvBlock) CHECK(l.c_out >= 1);
        }
        CHECK(report.groups_removed < static_cast<int>(groups.size()));
        // a forward pass still works at full size
        Rng rng(14);
        auto img = random_tensor({1, 1, 16, 16}, rng, 0.3);
        CHECK_NOTHROW(forward(net, img));
    }
}

TEST_CASE("zero-out-then-prune leaves outputs unchanged (skip groups included)") {
    auto net = committed_net(16, 2, 5, 15);
    Rng rng(16);

    const auto groups = build_prune_groups(net);
    // pick one skip-tied pair group and one singleton group
    const PruneGroup* pair = nullptr;
    const PruneGroup* single = nullptr;
    for (const auto& g : groups) {
        if (!g.prunable) continue;
        if (g.members.size() >= 2 && !pair) pair = &g;
        if (g.members.size() == 1 && !single) single = &g;
    }
    REQUIRE(pair != nullptr);
    REQUIRE(single != nullptr);

    for (const PruneGroup* target : {pair, single}) {
        auto work = committed_net(16, 2, 5, 15);  // fresh copy, same seed
        const auto wgroups = build_prune_groups(work);
        const PruneGroup* g = nullptr;
        for (const auto& wg : wgroups) {
            if (wg.members == target->members) g = &wg;
        }
        REQUIRE(g != nullptr);

        zero_group(work, *g);
        std::vector<TensorPtr> inputs, zeroed_out;
        for (int i = 0; i < 100; ++i) {
            inputs.push_back(random_tensor({1, 1, 16, 16}, rng, 0.4));
        }
        {
            GradGuard off(false);
            for (const auto& in : inputs) {
                zeroed_out.push_back(forward(work, in).stacks[0].corners);
            }
        }
        REQUIRE(remove_group(work, *g, nullptr));
        {
            GradGuard off(false);
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                auto after = forward(work, inputs[i]).stacks[0].corners;
                CHECK(max_abs_diff(zeroed_out[i], after) < 1e-9);
            }
        }
    }
}

TEST_CASE("after pruning, forward works at every legal input size") {
    auto net = committed_net(32, 2, 6, 17);
    const auto groups = build_prune_groups(net);
    PruneOptions opt;
    prune_step(net, groups, opt, nullptr);
    // the graph is built for one input size; shape consistency must hold for
    // every batch size
    Rng rng(18);
    GradGuard off(false);
    for (int b : {1, 2, 5}) {
        auto img = random_tensor({b, 1, 32, 32}, rng, 0.3);
        auto fr = forward(net, img);
        CHECK(fr.stacks[0].corners->dim(0) == b);
    }
}

TEST_CASE("adam moments follow pruned parameters") {
    auto net = committed_net(16, 1, 4, 19);
    AdamState adam;
    auto params = net.parameters();
    // one step so moments exist
    Rng rng(20);
    for (auto& p : params) {
        p->ensure_grad();
        for (auto& g : p->grad) g = rng.gaussian() * 0.01;
    }
    adam_step(params, adam);

    const auto groups = build_prune_groups(net);
    PruneOptions opt;
    opt.global_count = 2;
    prune_step(net, groups, opt, &adam);
    for (const auto& p : net.parameters()) {
        auto& mom = adam.moments_for(*p);
        CHECK(mom.m.size() == p->data.size());
        CHECK(mom.v.size() == p->data.size());
    }
    // a further training step still works
    for (auto& p : net.parameters()) {
        p->ensure_grad();
        std::fill(p->grad.begin(), p->grad.end(), 0.01);
    }
    CHECK_NOTHROW(adam_step(net.parameters(), adam));
}

TEST_CASE("L1 regularizer values and gradient") {
    SUBCASE("all-zero weights give 0; [1,-2] gives 3") {
        auto net = committed_net(16, 1, 2, 21);
        for (auto& l : net.layers) {
            if (l.kind == LayerKind::ConvBlock) {
                auto w = l.select->candidates[0].weights;
                std::fill(w->data.begin(), w->data.end(), 0.0);
            }
        }
        CHECK(l1_regularizer_value(net) == 0.0);
        // put exactly [1,-2] into one prunable channel
        const int e0 = conv_block_id(net, 1);
        auto w = net.layers[static_cast<std::size_t>(e0)].select->candidates[0].weights;
        w->data[0] = 1.0;
        w->data[1] = -2.0;
        CHECK(l1_regularizer_value(net) == 3.0);
    }

    SUBCASE("random net matches the elementwise-abs-sum oracle") {
        auto net = committed_net(16, 1, 4, 22);
        double expect = 0.0;
        for (const auto& l : net.layers) {
            if ((l.kind == LayerKind::ConvBlock || l.kind == LayerKind::Remap) && l.prunable) {
                const auto w = l.select->candidates[0].weights;
                for (double v : w->data) expect += std::abs(v);
            }
        }
        CHECK(l1_regularizer(net)->data[0] == doctest::Approx(expect).epsilon(1e-10));
        CHECK(std::abs(l1_regularizer_value(net) - expect) < 1e-10);
    }

    SUBCASE("gradient is the sign of the weights") {
        auto net = committed_net(16, 1, 2, 23);
        auto reg = l1_regularizer(net);
        backward(reg);
        for (const auto& l : net.layers) {
            if (l.kind != LayerKind::ConvBlock || !l.prunable) continue;
            const auto w = l.select->candidates[0].weights;
            for (std::size_t i = 0; i < w->data.size(); ++i) {
                const double expect = w->data[i] > 0 ? 1.0 : (w->data[i] < 0 ? -1.0 : 0.0);
                CHECK(w->grad[i] == expect);
            }
        }
    }
}
