#pragma once

// Single (optionally stacked) hourglass encoder-decoder with skip connections,
// SP-module conv blocks, and three 1x1-conv + sigmoid prediction heads
// (corners, entry lines, separating lines).

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sphg/select.hpp"
#include "sphg/tensor.hpp"

namespace sphg {

enum class LayerKind : std::uint8_t {
    ConvBlock = 0,  // SP select conv + ReLU
    Pool = 1,
    Upsample = 2,
    SkipAdd = 3,
    Head = 4,      // 1x1 conv + sigmoid, one channel
    Concat = 5,    // channel concat of previous stack's heads
    Remap = 6,     // 1x1 conv remapping injected heatmaps to feature width
};

const char* layer_kind_name(LayerKind k);

struct LayerSpec {
    int id = -1;
    LayerKind kind = LayerKind::ConvBlock;
    int input_id = -1;                 // main producer; -1 = network input
    int skip_input_id = -1;            // SkipAdd second operand
    std::vector<int> concat_inputs;    // Concat producers
    int c_in = 0;
    int c_out = 0;
    int feature_size = 0;              // output spatial extent
    bool prunable = false;             // ConvBlock/Remap outputs that pruning may remove

    std::shared_ptr<SelectState> select;  // ConvBlock
    TensorPtr conv_w, conv_b;             // Head / Remap (plain 1x1 conv)
};

struct HeatmapTriple {
    TensorPtr corners;            // [B,1,H,W], sigmoid outputs
    TensorPtr entry_lines;
    TensorPtr separating_lines;
};

struct NetworkConfig {
    int input_size = 64;
    int depth = 3;
    int base_channels = 16;
    int stack_count = 1;
    std::vector<int> candidate_dilations = {1, 2};
    int kernel_size = 3;
    // Feature sizes >= this use an enlarged standard kernel with the same
    // receptive field instead of a dilated one.
    int enlarge_threshold = 28;
    int cen_hidden = 16;
    double head_bias_init = -2.2;
};

struct ForwardResult {
    std::vector<HeatmapTriple> stacks;               // one triple per stack
    std::vector<std::pair<int, TensorPtr>> alphas;   // (layer id, alpha) of uncommitted blocks
};

struct NetworkGraph {
    NetworkConfig config;
    std::vector<LayerSpec> layers;
    std::vector<std::pair<int, int>> skip_edges;     // (producer, skip-add consumer)
    std::vector<std::array<int, 3>> head_ids;        // per stack: corners, entry, sep

    // Deterministic parameter order (used by the optimizer and checkpoints).
    std::vector<TensorPtr> parameters() const;
    std::int64_t parameter_count() const;
    bool fully_committed() const;
    std::vector<int> selectable_layer_ids() const;   // uncommitted conv blocks, in order
};

NetworkGraph build_network(const NetworkConfig& cfg, Rng& rng);

// Runs the graph; train_cen controls whether CEN outputs stay attached to the
// autodiff graph. Thread-safe for concurrent calls when grads are disabled.
ForwardResult forward(const NetworkGraph& net, const TensorPtr& images, bool train_cen = false);

// Triple used for loss at the given stack (intermediate supervision).
const HeatmapTriple& intermediate_heads(const ForwardResult& r, int stack_index);

// Candidate set for one layer under the kernel-size policy: dilations become
// enlarged standard kernels when the feature map is at or above the threshold.
std::vector<CandidateSpec> candidates_for_feature_size(int feature_size, int kernel_size,
                                                       const std::vector<int>& dilations,
                                                       int enlarge_threshold);

}  // namespace sphg
