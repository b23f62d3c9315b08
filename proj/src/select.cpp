#include "sphg/select.hpp"

#include <algorithm>
#include <cmath>

namespace sphg {

const ConvKernel& SelectState::committed_kernel() const {
    if (!is_committed()) throw ContractError("select: no committed kernel");
    return candidates[0];
}

SelectState make_select_state(int c_out, int c_in, const std::vector<CandidateSpec>& cands,
                              int cen_hidden, Rng& rng) {
    if (cands.empty()) throw ConfigError("select: candidate list is empty");
    SelectState s;
    s.candidate_specs = cands;
    for (const auto& c : cands) {
        s.candidates.push_back(ConvKernel::make(c_out, c_in, c.k, c.dilation, rng));
    }
    const int K = static_cast<int>(cands.size());
    if (K == 1) {
        // single candidate: nothing to select, behave as a plain conv
        s.committed = 0;
        return s;
    }
    const double in_std = std::sqrt(2.0 / (2.0 * K));
    const double hid_std = std::sqrt(2.0 / cen_hidden);
    s.cen_w1 = Tensor::randn({cen_hidden, 2 * K}, rng, in_std, true);
    s.cen_b1 = Tensor::zeros({cen_hidden}, true);
    s.cen_w2 = Tensor::randn({K, cen_hidden}, rng, hid_std, true);
    s.cen_b2 = Tensor::zeros({K}, true);
    quantize_f32(*s.cen_w1);
    quantize_f32(*s.cen_w2);
    s.alpha_accum.assign(static_cast<std::size_t>(K), 0.0);
    return s;
}

TensorPtr cen_forward(SelectState& s, bool train_cen) {
    if (s.is_committed()) throw ContractError("cen_forward on a committed select state");
    if (s.candidate_count() < 2) throw ContractError("cen_forward needs >= 2 candidates");

    TensorPtr alpha;
    {
        GradGuard guard(grad_enabled() && train_cen);
        std::vector<TensorPtr> ws;
        for (const auto& c : s.candidates) ws.push_back(c.weights);
        auto stats = weight_stats(ws);
        auto hidden = relu(dense(stats, s.cen_w1, s.cen_b1));
        auto logits = dense(hidden, s.cen_w2, s.cen_b2);
        alpha = softmax_lastdim(logits);
    }
    s.last_alpha = alpha->data;
    return alpha;
}

TensorPtr select_forward(SelectState& s, const TensorPtr& input, bool train_cen,
                         TensorPtr* alpha_out) {
    if (s.is_committed()) {
        return conv2d(input, s.candidates[0]);
    }
    auto alpha = cen_forward(s, train_cen);
    if (alpha_out) *alpha_out = alpha;
    std::vector<TensorPtr> outs;
    outs.reserve(s.candidates.size());
    for (const auto& c : s.candidates) outs.push_back(conv2d(input, c));
    return weighted_sum(outs, alpha);
}

TensorPtr cen_regularizer(const std::vector<TensorPtr>& alphas) {
    if (alphas.empty()) return Tensor::zeros({1});
    auto out = make_node({1}, std::vector<TensorPtr>(alphas.begin(), alphas.end()));
    std::vector<double> sums;
    sums.reserve(alphas.size());
    double total = 0.0;
    for (const auto& a : alphas) {
        double sq = 0.0;
        for (double v : a->data) sq += v * v;
        sums.push_back(sq);
        total += -std::log(sq);
    }
    out->data[0] = total;
    check_finite(*out, "cen_regularizer");
    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> as = alphas;
        out->backward_fn = [o, as, sums] {
            const double g = o->grad[0];
            for (std::size_t i = 0; i < as.size(); ++i) {
                if (!as[i]->requires_grad) continue;
                as[i]->ensure_grad();
                for (std::size_t j = 0; j < as[i]->data.size(); ++j) {
                    as[i]->grad[j] += g * (-2.0 * as[i]->data[j] / sums[i]);
                }
            }
        };
    }
    return out;
}

double cen_regularizer_value(const std::vector<std::vector<double>>& alphas) {
    double total = 0.0;
    for (const auto& a : alphas) {
        double sq = 0.0;
        for (double v : a) sq += v * v;
        total += -std::log(sq);
    }
    return total;
}

void accumulate_alpha(SelectState& s) {
    if (s.is_committed() || s.last_alpha.empty()) return;
    for (std::size_t i = 0; i < s.alpha_accum.size(); ++i) s.alpha_accum[i] += s.last_alpha[i];
    ++s.alpha_batches;
}

void end_epoch_alpha(SelectState& s) {
    if (s.is_committed() || s.alpha_batches == 0) return;
    std::vector<double> mean(s.alpha_accum.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        mean[i] = s.alpha_accum[i] / static_cast<double>(s.alpha_batches);
    }
    s.alpha_history.push_back(std::move(mean));
    std::fill(s.alpha_accum.begin(), s.alpha_accum.end(), 0.0);
    s.alpha_batches = 0;
}

void reset_alpha_window(SelectState& s) {
    s.alpha_history.clear();
    std::fill(s.alpha_accum.begin(), s.alpha_accum.end(), 0.0);
    s.alpha_batches = 0;
}

std::vector<double> alpha_history_mean(const SelectState& s) {
    if (s.alpha_history.empty()) throw ContractError("select: alpha history is empty");
    std::vector<double> mean(s.alpha_history[0].size(), 0.0);
    for (const auto& epoch : s.alpha_history) {
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += epoch[i];
    }
    for (auto& v : mean) v /= static_cast<double>(s.alpha_history.size());
    return mean;
}

int commit_selection(SelectState& s, std::vector<TensorPtr>* dropped) {
    if (s.is_committed()) throw ContractError("select: already committed");
    const auto mean = alpha_history_mean(s);
    int winner = 0;
    for (std::size_t i = 1; i < mean.size(); ++i) {
        if (mean[i] > mean[winner]) winner = static_cast<int>(i);
    }
    if (dropped) {
        for (std::size_t i = 0; i < s.candidates.size(); ++i) {
            if (static_cast<int>(i) == winner) continue;
            dropped->push_back(s.candidates[i].weights);
            dropped->push_back(s.candidates[i].bias);
        }
        dropped->push_back(s.cen_w1);
        dropped->push_back(s.cen_b1);
        dropped->push_back(s.cen_w2);
        dropped->push_back(s.cen_b2);
    }
    ConvKernel win = s.candidates[static_cast<std::size_t>(winner)];
    s.candidates.clear();
    s.candidates.push_back(std::move(win));
    s.cen_w1 = s.cen_b1 = s.cen_w2 = s.cen_b2 = nullptr;
    s.committed = winner;
    s.last_alpha.clear();
    s.alpha_accum.clear();
    s.alpha_batches = 0;
    return winner;
}

}  // namespace sphg
