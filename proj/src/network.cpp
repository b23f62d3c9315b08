#include "sphg/network.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace sphg {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::ConvBlock: return "conv-block";
        case LayerKind::Pool: return "pool";
        case LayerKind::Upsample: return "upsample";
        case LayerKind::SkipAdd: return "skip-add";
        case LayerKind::Head: return "head";
        case LayerKind::Concat: return "concat";
        case LayerKind::Remap: return "remap";
    }
    return "?";
}

std::vector<CandidateSpec> candidates_for_feature_size(int feature_size, int kernel_size,
                                                       const std::vector<int>& dilations,
                                                       int enlarge_threshold) {
    std::vector<CandidateSpec> out;
    for (int d : dilations) {
        if (d < 1) throw ConfigError("candidate dilation must be >= 1");
        CandidateSpec c;
        if (feature_size >= enlarge_threshold && d > 1) {
            // same receptive field via a standard kernel
            c.k = kernel_size + (kernel_size - 1) * (d - 1);
            c.dilation = 1;
        } else {
            c.k = kernel_size;
            c.dilation = d;
        }
        out.push_back(c);
    }
    return out;
}

namespace {

TensorPtr make_conv1x1(int c_out, int c_in, double bias_init, Rng& rng, TensorPtr& bias_out) {
    const double stddev = std::sqrt(2.0 / c_in);
    auto w = Tensor::randn({c_out, c_in, 1, 1}, rng, stddev, true);
    quantize_f32(*w);
    bias_out = Tensor::full({c_out}, static_cast<double>(static_cast<float>(bias_init)), true);
    return w;
}

}  // namespace

NetworkGraph build_network(const NetworkConfig& cfg, Rng& rng) {
    if (cfg.depth < 1) throw ConfigError("network depth must be >= 1");
    if (cfg.base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (cfg.stack_count < 1 || cfg.stack_count > 2) throw ConfigError("stack_count must be 1 or 2");
    int sz = cfg.input_size;
    for (int d = 0; d < cfg.depth; ++d) {
        if (sz % 2 != 0) throw ConfigError("input size not divisible by 2^depth");
        sz /= 2;
    }
    if (sz < 4) throw ConfigError("deepest feature map would be smaller than 4x4");

    NetworkGraph net;
    net.config = cfg;
    const int C = cfg.base_channels;

    auto add_layer = [&](LayerSpec spec) -> int {
        spec.id = static_cast<int>(net.layers.size());
        net.layers.push_back(std::move(spec));
        return net.layers.back().id;
    };
    auto add_conv_block = [&](int input_id, int c_in, int c_out, int fs, bool prunable) -> int {
        LayerSpec spec;
        spec.kind = LayerKind::ConvBlock;
        spec.input_id = input_id;
        spec.c_in = c_in;
        spec.c_out = c_out;
        spec.feature_size = fs;
        spec.prunable = prunable;
        auto cands = candidates_for_feature_size(fs, cfg.kernel_size, cfg.candidate_dilations,
                                                 cfg.enlarge_threshold);
        spec.select = std::make_shared<SelectState>(
            make_select_state(c_out, c_in, cands, cfg.cen_hidden, rng));
        return add_layer(std::move(spec));
    };

    int prev_feature = -1;  // layer id of the running feature map
    std::array<int, 3> prev_heads{-1, -1, -1};

    for (int s = 0; s < cfg.stack_count; ++s) {
        int cur;
        if (s == 0) {
            // input stem; never prunable
            cur = add_conv_block(-1, 1, C, cfg.input_size, false);
        } else {
            // re-inject previous heads onto the previous stack's features
            LayerSpec cat;
            cat.kind = LayerKind::Concat;
            cat.concat_inputs = {prev_heads[0], prev_heads[1], prev_heads[2]};
            cat.c_in = 3;
            cat.c_out = 3;
            cat.feature_size = cfg.input_size;
            const int cat_id = add_layer(std::move(cat));

            LayerSpec remap;
            remap.kind = LayerKind::Remap;
            remap.input_id = cat_id;
            remap.c_in = 3;
            remap.c_out = C;
            remap.feature_size = cfg.input_size;
            remap.prunable = true;
            remap.conv_w = make_conv1x1(C, 3, 0.0, rng, remap.conv_b);
            const int remap_id = add_layer(std::move(remap));

            LayerSpec inj;
            inj.kind = LayerKind::SkipAdd;
            inj.input_id = prev_feature;
            inj.skip_input_id = remap_id;
            inj.c_in = C;
            inj.c_out = C;
            inj.feature_size = cfg.input_size;
            cur = add_layer(std::move(inj));
            net.skip_edges.emplace_back(remap_id, cur);
        }

        // encoder
        std::vector<int> skip_sources;
        int fs = cfg.input_size;
        for (int d = 0; d < cfg.depth; ++d) {
            cur = add_conv_block(cur, C, C, fs, true);
            skip_sources.push_back(cur);
            LayerSpec pool;
            pool.kind = LayerKind::Pool;
            pool.input_id = cur;
            pool.c_in = C;
            pool.c_out = C;
            fs /= 2;
            pool.feature_size = fs;
            cur = add_layer(std::move(pool));
        }

        // bottleneck
        cur = add_conv_block(cur, C, C, fs, true);

        // decoder
        for (int d = cfg.depth - 1; d >= 0; --d) {
            LayerSpec up;
            up.kind = LayerKind::Upsample;
            up.input_id = cur;
            up.c_in = C;
            up.c_out = C;
            fs *= 2;
            up.feature_size = fs;
            cur = add_layer(std::move(up));

            LayerSpec sk;
            sk.kind = LayerKind::SkipAdd;
            sk.input_id = cur;
            sk.skip_input_id = skip_sources[static_cast<std::size_t>(d)];
            sk.c_in = C;
            sk.c_out = C;
            sk.feature_size = fs;
            const int sk_id = add_layer(std::move(sk));
            net.skip_edges.emplace_back(skip_sources[static_cast<std::size_t>(d)], sk_id);
            cur = sk_id;

            cur = add_conv_block(cur, C, C, fs, true);
        }

        prev_feature = cur;
        std::array<int, 3> heads{};
        for (int h = 0; h < 3; ++h) {
            LayerSpec head;
            head.kind = LayerKind::Head;
            head.input_id = cur;
            head.c_in = C;
            head.c_out = 1;
            head.feature_size = cfg.input_size;
            head.conv_w = make_conv1x1(1, C, cfg.head_bias_init, rng, head.conv_b);
            heads[static_cast<std::size_t>(h)] = add_layer(std::move(head));
        }
        net.head_ids.push_back(heads);
        prev_heads = heads;
    }
    return net;
}

std::vector<TensorPtr> NetworkGraph::parameters() const {
    std::vector<TensorPtr> out;
    for (const auto& layer : layers) {
        if (layer.kind == LayerKind::ConvBlock) {
            const auto& s = *layer.select;
            for (const auto& c : s.candidates) {
                out.push_back(c.weights);
                out.push_back(c.bias);
            }
            if (!s.is_committed()) {
                out.push_back(s.cen_w1);
                out.push_back(s.cen_b1);
                out.push_back(s.cen_w2);
                out.push_back(s.cen_b2);
            }
        } else if (layer.kind == LayerKind::Head || layer.kind == LayerKind::Remap) {
            out.push_back(layer.conv_w);
            out.push_back(layer.conv_b);
        }
    }
    return out;
}

std::int64_t NetworkGraph::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
}

bool NetworkGraph::fully_committed() const {
    for (const auto& layer : layers) {
        if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) return false;
    }
    return true;
}

std::vector<int> NetworkGraph::selectable_layer_ids() const {
    std::vector<int> out;
    for (const auto& layer : layers) {
        if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) {
            out.push_back(layer.id);
        }
    }
    return out;
}

ForwardResult forward(const NetworkGraph& net, const TensorPtr& images, bool train_cen) {
    if (images->ndim() != 4 || images->dim(1) != 1) {
        throw ConfigError("forward expects images [B,1,H,W]");
    }
    if (images->dim(2) != net.config.input_size || images->dim(3) != net.config.input_size) {
        throw ConfigError("forward: image size does not match the network input size");
    }

    ForwardResult result;
    std::vector<TensorPtr> outputs(net.layers.size());
    auto producer = [&](int id) -> const TensorPtr& {
        return id < 0 ? images : outputs[static_cast<std::size_t>(id)];
    };

    for (const auto& layer : net.layers) {
        TensorPtr out;
        switch (layer.kind) {
            case LayerKind::ConvBlock: {
                auto& sel = *layer.select;
                TensorPtr alpha;
                out = relu(select_forward(sel, producer(layer.input_id), train_cen, &alpha));
                if (alpha) result.alphas.emplace_back(layer.id, alpha);
                break;
            }
            case LayerKind::Pool:
                out = maxpool2x2(producer(layer.input_id));
                break;
            case LayerKind::Upsample:
                out = upsample_nearest2x(producer(layer.input_id));
                break;
            case LayerKind::SkipAdd:
                out = add(producer(layer.input_id), producer(layer.skip_input_id));
                break;
            case LayerKind::Concat: {
                std::vector<TensorPtr> ins;
                for (int id : layer.concat_inputs) ins.push_back(producer(id));
                out = concat_channels(ins);
                break;
            }
            case LayerKind::Remap:
            case LayerKind::Head:
                out = conv2d(producer(layer.input_id), layer.conv_w, layer.conv_b, 1);
                if (layer.kind == LayerKind::Head) out = sigmoid(out);
                break;
        }
        outputs[static_cast<std::size_t>(layer.id)] = std::move(out);
    }

    for (const auto& heads : net.head_ids) {
        HeatmapTriple t;
        t.corners = outputs[static_cast<std::size_t>(heads[0])];
        t.entry_lines = outputs[static_cast<std::size_t>(heads[1])];
        t.separating_lines = outputs[static_cast<std::size_t>(heads[2])];
        result.stacks.push_back(std::move(t));
    }
    return result;
}

const HeatmapTriple& intermediate_heads(const ForwardResult& r, int stack_index) {
    if (stack_index < 0 || stack_index >= static_cast<int>(r.stacks.size())) {
        throw ContractError("intermediate_heads: stack index out of range");
    }
    return r.stacks[static_cast<std::size_t>(stack_index)];
}

}  // namespace sphg
