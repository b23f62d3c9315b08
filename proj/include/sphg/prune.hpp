#pragma once

// Prune half of the SP module: channels are scored by softmax-normalized L2
// norms (per layer), channels tied through skip connections are grouped and
// scored jointly, and after each epoch the two pruning rules remove
// (a) groups whose layer-relative contribution is below a threshold and
// (b) the globally smallest-scoring groups.

#include <functional>
#include <vector>

#include "sphg/network.hpp"

namespace sphg {

struct PruneGroup {
    std::vector<std::pair<int, int>> members;  // (layer id, output-channel index)
    double score = 0.0;                        // sum of member contributions
    bool prunable = true;
};

// Eq. 5: contribution_i = exp(||W_i||_2) / sum_j exp(||W_j||_2) over the
// layer's committed kernel output channels. Scores are positive and sum to 1.
std::vector<double> channel_contribution(const NetworkGraph& net, int layer_id);

// Groups cover every prunable output channel exactly once; channels merged by
// a skip-add share a group. Requires a fully committed network.
std::vector<PruneGroup> build_prune_groups(const NetworkGraph& net);

struct PruneOptions {
    double layer_threshold = 0.01;
    int global_count = 5;
    // Called after each single-group removal (the network is shape-consistent
    // at every call); used to snapshot parameter tiers mid-step.
    std::function<void()> after_group_removed;
};

struct PruneReport {
    std::vector<std::pair<int, int>> removed;      // (layer id, original channel index)
    int groups_removed = 0;
    int rule_a_groups = 0;
    int rule_b_groups = 0;
    std::vector<std::pair<int, int>> new_counts;   // (layer id, new c_out) for touched layers
};

// Removes rule-(a) groups then the global_count smallest remaining groups,
// skipping any group whose removal would empty a layer. Weights, biases and
// every consumer's input slices are rebuilt in place; Adam moments (when
// given) are sliced identically.
PruneReport prune_step(NetworkGraph& net, const std::vector<PruneGroup>& groups,
                       const PruneOptions& opt, AdamState* adam = nullptr);

// L1 over prunable committed channel weights (graph node / plain value).
TensorPtr l1_regularizer(const NetworkGraph& net);
double l1_regularizer_value(const NetworkGraph& net);

// Removes one group (must come from build_prune_groups on the current net).
// Returns false when removal would empty a layer.
bool remove_group(NetworkGraph& net, const PruneGroup& group, AdamState* adam = nullptr);

// Test support: zeroes a group's weights, biases and all consumer input
// slices, so that pruning it afterwards provably cannot change any output.
void zero_group(NetworkGraph& net, const PruneGroup& group);

}  // namespace sphg
