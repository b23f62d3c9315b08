#include "sphg/prune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace sphg {

namespace {

bool owns_channels(const LayerSpec& layer) {
    return layer.kind == LayerKind::ConvBlock || layer.kind == LayerKind::Remap;
}

bool consumes_channels(const LayerSpec& layer) {
    return layer.kind == LayerKind::ConvBlock || layer.kind == LayerKind::Remap ||
           layer.kind == LayerKind::Head;
}

TensorPtr layer_weights(const LayerSpec& layer) {
    if (layer.kind == LayerKind::ConvBlock) {
        if (!layer.select->is_committed()) {
            throw ContractError("prune: layer has no committed kernel");
        }
        return layer.select->candidates[0].weights;
    }
    return layer.conv_w;
}

TensorPtr layer_bias(const LayerSpec& layer) {
    if (layer.kind == LayerKind::ConvBlock) return layer.select->candidates[0].bias;
    return layer.conv_b;
}

struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(static_cast<std::size_t>(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    }
};

struct Unit {
    int layer = -1;
    int channel = -1;
    bool prunable = false;
};

struct ConsumerSlice {
    int unit = -1;
    int layer = -1;
    int position = -1;  // input-channel index at group-build time
};

// Channel identity propagation: each ConvBlock/Remap output channel is a unit;
// pool/upsample/relu keep identities, skip-add merges them pairwise, weighted
// consumers (conv/remap/head) record which unit each input slice reads.
struct Propagation {
    std::vector<Unit> units;
    Dsu dsu{0};
    std::vector<ConsumerSlice> consumers;
};

Propagation propagate(const NetworkGraph& net) {
    Propagation prop;
    std::vector<std::vector<int>> spaces(net.layers.size());

    int unit_count = 0;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer)) unit_count += layer.c_out;
    }
    prop.dsu = Dsu(unit_count);

    auto space_of = [&](int id) -> const std::vector<int>& {
        static const std::vector<int> empty;
        return id < 0 ? empty : spaces[static_cast<std::size_t>(id)];
    };

    for (const auto& layer : net.layers) {
        if (consumes_channels(layer)) {
            const auto& in_space = space_of(layer.input_id);
            for (int p = 0; p < static_cast<int>(in_space.size()); ++p) {
                prop.consumers.push_back({in_space[static_cast<std::size_t>(p)], layer.id, p});
            }
        }
        switch (layer.kind) {
            case LayerKind::ConvBlock:
            case LayerKind::Remap: {
                std::vector<int> sp(static_cast<std::size_t>(layer.c_out));
                for (int c = 0; c < layer.c_out; ++c) {
                    const int u = static_cast<int>(prop.units.size());
                    prop.units.push_back({layer.id, c, layer.prunable});
                    sp[static_cast<std::size_t>(c)] = u;
                }
                spaces[static_cast<std::size_t>(layer.id)] = std::move(sp);
                break;
            }
            case LayerKind::Pool:
            case LayerKind::Upsample:
                spaces[static_cast<std::size_t>(layer.id)] = space_of(layer.input_id);
                break;
            case LayerKind::SkipAdd: {
                const auto& a = space_of(layer.input_id);
                const auto& b = space_of(layer.skip_input_id);
                if (a.size() != b.size()) throw ContractError("prune: skip-add channel mismatch");
                for (std::size_t i = 0; i < a.size(); ++i) prop.dsu.unite(a[i], b[i]);
                spaces[static_cast<std::size_t>(layer.id)] = a;
                break;
            }
            case LayerKind::Concat: {
                std::vector<int> sp;
                for (int id : layer.concat_inputs) {
                    const auto& in = space_of(id);
                    sp.insert(sp.end(), in.begin(), in.end());
                }
                spaces[static_cast<std::size_t>(layer.id)] = std::move(sp);
                break;
            }
            case LayerKind::Head:
                // single fixed output channel; produces no prunable units
                spaces[static_cast<std::size_t>(layer.id)] = {};
                break;
        }
    }
    return prop;
}

}  // namespace

std::vector<double> channel_contribution(const NetworkGraph& net, int layer_id) {
    const auto& layer = net.layers.at(static_cast<std::size_t>(layer_id));
    if (!owns_channels(layer)) throw ContractError("channel_contribution: layer has no channels");
    const auto w = layer_weights(layer);
    const int c_out = w->dim(0);
    const std::int64_t per = w->numel() / c_out;

    std::vector<double> norms(static_cast<std::size_t>(c_out));
    for (int c = 0; c < c_out; ++c) {
        double sq = 0.0;
        const double* p = w->data.data() + static_cast<std::int64_t>(c) * per;
        for (std::int64_t i = 0; i < per; ++i) sq += p[i] * p[i];
        norms[static_cast<std::size_t>(c)] = std::sqrt(sq);
    }
    // softmax over norms (max-shifted; same values as the direct form)
    const double mx = *std::max_element(norms.begin(), norms.end());
    double sum = 0.0;
    std::vector<double> out(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) {
        out[i] = std::exp(norms[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

std::vector<PruneGroup> build_prune_groups(const NetworkGraph& net) {
    if (!net.fully_committed()) throw ContractError("build_prune_groups: network not committed");
    auto prop = propagate(net);

    std::map<int, std::vector<double>> contributions;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer)) contributions[layer.id] = channel_contribution(net, layer.id);
    }

    std::map<int, PruneGroup> by_root;
    for (std::size_t u = 0; u < prop.units.size(); ++u) {
        const int root = prop.dsu.find(static_cast<int>(u));
        auto& g = by_root[root];
        g.members.emplace_back(prop.units[u].layer, prop.units[u].channel);
        g.score += contributions[prop.units[u].layer][static_cast<std::size_t>(prop.units[u].channel)];
        g.prunable = g.prunable && prop.units[u].prunable;
    }

    std::vector<PruneGroup> groups;
    groups.reserve(by_root.size());
    for (auto& [root, g] : by_root) {
        std::sort(g.members.begin(), g.members.end());
        groups.push_back(std::move(g));
    }
    return groups;
}

namespace {

void remove_output_channel(LayerSpec& layer, int idx, AdamState* adam) {
    auto w = layer_weights(layer);
    auto b = layer_bias(layer);
    const int c_out = w->dim(0);
    const std::int64_t per = w->numel() / c_out;
    std::vector<char> keep_w(w->data.size(), 1);
    for (std::int64_t i = 0; i < per; ++i) {
        keep_w[static_cast<std::size_t>(idx * per + i)] = 0;
    }
    std::vector<double> nd;
    nd.reserve(w->data.size() - static_cast<std::size_t>(per));
    for (std::size_t i = 0; i < w->data.size(); ++i) {
        if (keep_w[i]) nd.push_back(w->data[i]);
    }
    w->data = std::move(nd);
    w->shape[0] -= 1;
    w->grad.clear();
    if (adam) adam->slice_state(*w, keep_w);

    std::vector<char> keep_b(b->data.size(), 1);
    keep_b[static_cast<std::size_t>(idx)] = 0;
    b->data.erase(b->data.begin() + idx);
    b->shape[0] -= 1;
    b->grad.clear();
    if (adam) adam->slice_state(*b, keep_b);

    layer.c_out -= 1;
}

void remove_input_slice(LayerSpec& layer, int idx, AdamState* adam) {
    auto w = layer_weights(layer);
    const int c_out = w->dim(0);
    const int c_in = w->dim(1);
    const std::int64_t kk = w->numel() / (static_cast<std::int64_t>(c_out) * c_in);
    std::vector<char> keep(w->data.size(), 1);
    for (int co = 0; co < c_out; ++co) {
        const std::int64_t base = (static_cast<std::int64_t>(co) * c_in + idx) * kk;
        for (std::int64_t i = 0; i < kk; ++i) keep[static_cast<std::size_t>(base + i)] = 0;
    }
    std::vector<double> nd;
    nd.reserve(w->data.size() - static_cast<std::size_t>(c_out * kk));
    for (std::size_t i = 0; i < w->data.size(); ++i) {
        if (keep[i]) nd.push_back(w->data[i]);
    }
    w->data = std::move(nd);
    w->shape[1] -= 1;
    w->grad.clear();
    if (adam) adam->slice_state(*w, keep);
    layer.c_in -= 1;
}

// pass-through layers track their producers' channel counts
void refresh_channel_counts(NetworkGraph& net) {
    auto c_of = [&](int id) { return id < 0 ? 1 : net.layers[static_cast<std::size_t>(id)].c_out; };
    for (auto& layer : net.layers) {
        switch (layer.kind) {
            case LayerKind::Pool:
            case LayerKind::Upsample:
                layer.c_in = layer.c_out = c_of(layer.input_id);
                break;
            case LayerKind::SkipAdd:
                if (c_of(layer.input_id) != c_of(layer.skip_input_id)) {
                    throw ContractError("prune: skip-add operands diverged");
                }
                layer.c_in = layer.c_out = c_of(layer.input_id);
                break;
            case LayerKind::Concat: {
                int c = 0;
                for (int id : layer.concat_inputs) c += c_of(id);
                layer.c_in = layer.c_out = c;
                break;
            }
            default:
                break;
        }
    }
}

struct GroupOrder {
    double score;
    int min_layer;
    int min_channel;
    std::size_t index;
    bool operator<(const GroupOrder& o) const {
        if (score != o.score) return score < o.score;
        if (min_layer != o.min_layer) return min_layer < o.min_layer;
        return min_channel < o.min_channel;
    }
};

}  // namespace

PruneReport prune_step(NetworkGraph& net, const std::vector<PruneGroup>& groups,
                       const PruneOptions& opt, AdamState* adam) {
    if (!net.fully_committed()) throw ContractError("prune_step: network not committed");
    auto prop = propagate(net);

    std::map<int, std::vector<double>> contributions;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer)) contributions[layer.id] = channel_contribution(net, layer.id);
    }

    // unit id lookup for consumer-slice resolution
    std::map<std::pair<int, int>, int> unit_of;
    for (std::size_t u = 0; u < prop.units.size(); ++u) {
        unit_of[{prop.units[u].layer, prop.units[u].channel}] = static_cast<int>(u);
    }
    std::map<int, std::vector<ConsumerSlice>> consumers_by_root;
    for (const auto& cs : prop.consumers) {
        consumers_by_root[prop.dsu.find(cs.unit)].push_back(cs);
    }

    // rule (a): all members below the per-layer threshold; rule (b): smallest scores
    std::vector<GroupOrder> rule_a, rest;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        if (!g.prunable || g.members.empty()) continue;
        GroupOrder ord{g.score, g.members[0].first, g.members[0].second, gi};
        double max_contrib = 0.0;
        for (const auto& [layer, ch] : g.members) {
            max_contrib = std::max(max_contrib, contributions[layer][static_cast<std::size_t>(ch)]);
        }
        if (max_contrib < opt.layer_threshold) {
            rule_a.push_back(ord);
        } else {
            rest.push_back(ord);
        }
    }
    std::sort(rule_a.begin(), rule_a.end());
    std::sort(rest.begin(), rest.end());

    // current index of each original channel, per producer layer
    std::map<int, std::vector<int>> out_map, in_map;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer)) {
            auto& m = out_map[layer.id];
            m.resize(static_cast<std::size_t>(layer.c_out));
            std::iota(m.begin(), m.end(), 0);
        }
        if (consumes_channels(layer)) {
            auto& m = in_map[layer.id];
            m.resize(static_cast<std::size_t>(layer.c_in));
            std::iota(m.begin(), m.end(), 0);
        }
    }
    std::map<int, int> live_count;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer)) live_count[layer.id] = layer.c_out;
    }

    PruneReport report;
    auto try_remove = [&](const PruneGroup& g) -> bool {
        std::map<int, int> per_layer;
        for (const auto& [layer, ch] : g.members) per_layer[layer] += 1;
        for (const auto& [layer, n] : per_layer) {
            if (live_count[layer] - n < 1) return false;  // would empty the layer
        }
        for (const auto& [layer_id, ch] : g.members) {
            auto& layer = net.layers[static_cast<std::size_t>(layer_id)];
            const int cur = out_map[layer_id][static_cast<std::size_t>(ch)];
            remove_output_channel(layer, cur, adam);
            out_map[layer_id][static_cast<std::size_t>(ch)] = -1;
            for (auto& v : out_map[layer_id]) {
                if (v > cur) --v;
            }
            live_count[layer_id] -= 1;
            report.removed.emplace_back(layer_id, ch);
        }
        const int root = prop.dsu.find(unit_of[{g.members[0].first, g.members[0].second}]);
        for (const auto& cs : consumers_by_root[root]) {
            auto& layer = net.layers[static_cast<std::size_t>(cs.layer)];
            const int cur = in_map[cs.layer][static_cast<std::size_t>(cs.position)];
            remove_input_slice(layer, cur, adam);
            in_map[cs.layer][static_cast<std::size_t>(cs.position)] = -1;
            for (auto& v : in_map[cs.layer]) {
                if (v > cur) --v;
            }
        }
        refresh_channel_counts(net);
        ++report.groups_removed;
        if (opt.after_group_removed) opt.after_group_removed();
        return true;
    };

    for (const auto& ord : rule_a) {
        if (try_remove(groups[ord.index])) ++report.rule_a_groups;
    }
    int removed_b = 0;
    for (const auto& ord : rest) {
        if (removed_b >= opt.global_count) break;
        if (try_remove(groups[ord.index])) {
            ++removed_b;
            ++report.rule_b_groups;
        }
    }

    std::map<int, int> touched;
    for (const auto& [layer, ch] : report.removed) {
        touched[layer] = net.layers[static_cast<std::size_t>(layer)].c_out;
    }
    for (const auto& [layer, c] : touched) report.new_counts.emplace_back(layer, c);
    return report;
}

bool remove_group(NetworkGraph& net, const PruneGroup& group, AdamState* adam) {
    auto prop = propagate(net);
    std::map<int, int> per_layer;
    for (const auto& [layer, ch] : group.members) per_layer[layer] += 1;
    for (const auto& [layer_id, n] : per_layer) {
        if (net.layers[static_cast<std::size_t>(layer_id)].c_out - n < 1) return false;
    }
    std::map<std::pair<int, int>, int> unit_of;
    for (std::size_t u = 0; u < prop.units.size(); ++u) {
        unit_of[{prop.units[u].layer, prop.units[u].channel}] = static_cast<int>(u);
    }
    // remove members; descending channel order within a layer keeps indices valid
    auto members = group.members;
    std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first < b.first : a.second > b.second;
    });
    for (const auto& [layer_id, ch] : members) {
        remove_output_channel(net.layers[static_cast<std::size_t>(layer_id)], ch, adam);
    }
    const int root = prop.dsu.find(unit_of.at({group.members[0].first, group.members[0].second}));
    std::vector<ConsumerSlice> slices;
    for (const auto& cs : prop.consumers) {
        if (prop.dsu.find(cs.unit) == root) slices.push_back(cs);
    }
    std::sort(slices.begin(), slices.end(), [](const ConsumerSlice& a, const ConsumerSlice& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.position > b.position;
    });
    for (const auto& cs : slices) {
        remove_input_slice(net.layers[static_cast<std::size_t>(cs.layer)], cs.position, adam);
    }
    refresh_channel_counts(net);
    return true;
}

TensorPtr l1_regularizer(const NetworkGraph& net) {
    std::vector<TensorPtr> ws;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer) && layer.prunable) ws.push_back(layer_weights(layer));
    }
    if (ws.empty()) return Tensor::zeros({1});
    auto out = make_node({1}, std::vector<TensorPtr>(ws.begin(), ws.end()));
    double total = 0.0;
    for (const auto& w : ws) {
        for (double v : w->data) total += std::abs(v);
    }
    out->data[0] = total;
    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> ps = ws;
        out->backward_fn = [o, ps] {
            const double g = o->grad[0];
            for (const auto& w : ps) {
                if (!w->requires_grad) continue;
                w->ensure_grad();
                for (std::size_t i = 0; i < w->data.size(); ++i) {
                    const double v = w->data[i];
                    w->grad[i] += g * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
                }
            }
        };
    }
    return out;
}

double l1_regularizer_value(const NetworkGraph& net) {
    double total = 0.0;
    for (const auto& layer : net.layers) {
        if (owns_channels(layer) && layer.prunable) {
            for (double v : layer_weights(layer)->data) total += std::abs(v);
        }
    }
    return total;
}

void zero_group(NetworkGraph& net, const PruneGroup& group) {
    auto prop = propagate(net);
    std::map<std::pair<int, int>, int> unit_of;
    for (std::size_t u = 0; u < prop.units.size(); ++u) {
        unit_of[{prop.units[u].layer, prop.units[u].channel}] = static_cast<int>(u);
    }
    for (const auto& [layer_id, ch] : group.members) {
        auto& layer = net.layers[static_cast<std::size_t>(layer_id)];
        auto w = layer_weights(layer);
        auto b = layer_bias(layer);
        const std::int64_t per = w->numel() / w->dim(0);
        for (std::int64_t i = 0; i < per; ++i) {
            w->data[static_cast<std::size_t>(ch * per + i)] = 0.0;
        }
        b->data[static_cast<std::size_t>(ch)] = 0.0;
    }
    const int root = prop.dsu.find(unit_of.at({group.members[0].first, group.members[0].second}));
    for (const auto& cs : prop.consumers) {
        if (prop.dsu.find(cs.unit) != root) continue;
        auto& layer = net.layers[static_cast<std::size_t>(cs.layer)];
        auto w = layer_weights(layer);
        const int c_out = w->dim(0);
        const int c_in = w->dim(1);
        const std::int64_t kk = w->numel() / (static_cast<std::int64_t>(c_out) * c_in);
        for (int co = 0; co < c_out; ++co) {
            const std::int64_t base = (static_cast<std::int64_t>(co) * c_in + cs.position) * kk;
            for (std::int64_t i = 0; i < kk; ++i) w->data[static_cast<std::size_t>(base + i)] = 0.0;
        }
    }
}

}  // namespace sphg
