#pragma once

// Select half of the SP convolution module: candidate dilated kernels run in
// parallel, a small Contribution Evaluation Network (CEN) predicts softmax
// weights over them from per-kernel weight statistics, and after a selection
// window the layer commits to the candidate with the highest average weight.
// A committed block is an ordinary dilated convolution.

#include <memory>
#include <vector>

#include "sphg/tensor.hpp"

namespace sphg {

struct CandidateSpec {
    int k = 3;
    int dilation = 1;
    int receptive_field() const { return k + (k - 1) * (dilation - 1); }
};

struct SelectState {
    std::vector<CandidateSpec> candidate_specs;  // full original list, kept for reporting
    std::vector<ConvKernel> candidates;          // uncommitted: all; committed: winner only

    // CEN: stats [1,2K] -> hidden -> K logits -> softmax. Dropped on commit.
    TensorPtr cen_w1, cen_b1, cen_w2, cen_b2;

    // running mean of alpha over the current selection window
    std::vector<double> alpha_accum;
    std::int64_t alpha_batches = 0;
    std::vector<std::vector<double>> alpha_history;  // one mean vector per epoch
    std::vector<double> last_alpha;                  // values from the latest forward

    int committed = -1;  // index into candidate_specs once committed

    bool is_committed() const { return committed >= 0; }
    int candidate_count() const { return static_cast<int>(candidates.size()); }
    const ConvKernel& committed_kernel() const;
};

SelectState make_select_state(int c_out, int c_in, const std::vector<CandidateSpec>& cands,
                              int cen_hidden, Rng& rng);

// alpha = Softmax(FC(ReLU(FC(stats)))), stats = per-candidate (mean, std) of
// kernel weights. Differentiable into both CEN parameters and kernel weights;
// with train_cen=false the alpha values are detached from the graph.
TensorPtr cen_forward(SelectState& s, bool train_cen = true);

// Uncommitted: sum_i alpha_i * conv_i(input); committed: plain conv with the
// winner (identical code path to conv2d, so outputs are bit-equal).
// alpha_out (when non-null and uncommitted) receives the live alpha graph
// node so the CEN regularizer can back-propagate through it.
TensorPtr select_forward(SelectState& s, const TensorPtr& input, bool train_cen = true,
                         TensorPtr* alpha_out = nullptr);

// L_CEN = sum_l -log(sum_i alpha_i^2): non-negative, 0 exactly at one-hot rows.
TensorPtr cen_regularizer(const std::vector<TensorPtr>& alphas);
double cen_regularizer_value(const std::vector<std::vector<double>>& alphas);

// alpha window bookkeeping (driven by the trainer)
void accumulate_alpha(SelectState& s);    // adds last_alpha into the running sum
void end_epoch_alpha(SelectState& s);     // pushes the epoch mean into alpha_history
void reset_alpha_window(SelectState& s);

// Means over the current window's history entries; used for the winner choice.
std::vector<double> alpha_history_mean(const SelectState& s);

// Keeps the argmax candidate, discards losers and the CEN. Returns the winner
// index. dropped (when non-null) receives the tensors that left the model so
// the caller can purge optimizer state.
int commit_selection(SelectState& s, std::vector<TensorPtr>* dropped = nullptr);

}  // namespace sphg
