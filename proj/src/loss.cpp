#include "sphg/loss.hpp"

#include <algorithm>
#include <cmath>

#include "sphg/prune.hpp"

namespace sphg {

namespace {
constexpr double kClampLo = 1e-6;
constexpr double kClampHi = 1.0 - 1e-6;
}  // namespace

FocalResult focal_loss(const TensorPtr& pred, const TensorPtr& target, double positive_threshold) {
    if (pred->shape != target->shape) throw ConfigError("focal_loss: shape mismatch");
    const std::int64_t n = pred->numel();

    auto out = make_node({1}, {pred});
    std::int64_t clamped = 0;
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double p = pred->data[static_cast<std::size_t>(i)];
        if (p < kClampLo || p > kClampHi) {
            p = std::clamp(p, kClampLo, kClampHi);
            ++clamped;
        }
        const double y = target->data[static_cast<std::size_t>(i)];
        if (y >= positive_threshold) {
            total += -(1.0 - p) * (1.0 - p) * std::log(p);
        } else {
            const double w = (1.0 - y) * (1.0 - y) * (1.0 - y) * (1.0 - y);
            total += -w * p * p * std::log(1.0 - p);
        }
    }
    out->data[0] = total / static_cast<double>(n);
    check_finite(*out, "focal_loss");

    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pp = pred, tt = target;
        out->backward_fn = [o, pp, tt, positive_threshold, n] {
            pp->ensure_grad();
            const double g = o->grad[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const double praw = pp->data[static_cast<std::size_t>(i)];
                if (praw < kClampLo || praw > kClampHi) continue;  // clamp is flat
                const double p = praw;
                const double y = tt->data[static_cast<std::size_t>(i)];
                double d;
                if (y >= positive_threshold) {
                    d = 2.0 * (1.0 - p) * std::log(p) - (1.0 - p) * (1.0 - p) / p;
                } else {
                    const double w = (1.0 - y) * (1.0 - y) * (1.0 - y) * (1.0 - y);
                    d = -w * (2.0 * p * std::log(1.0 - p) - p * p / (1.0 - p));
                }
                pp->grad[static_cast<std::size_t>(i)] += g * d;
            }
        };
    }
    return {out, clamped};
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Warmup: return "warmup";
        case Stage::CenPretrain: return "cen";
        case Stage::Select: return "select";
        case Stage::Prune: return "prune";
        case Stage::Finetune: return "finetune";
    }
    return "?";
}

StageGate gate_for_stage(Stage s) {
    StageGate g;
    switch (s) {
        case Stage::Warmup:
        case Stage::Finetune:
            break;
        case Stage::CenPretrain:
        case Stage::Select:
            g.cen = true;
            break;
        case Stage::Prune:
            g.l1 = true;
            break;
    }
    return g;
}

LossBreakdown total_loss(const std::vector<HeatmapTriple>& stacks, const TargetHeatmaps& target,
                         const std::vector<std::pair<int, TensorPtr>>& alphas,
                         const NetworkGraph* net, const LossWeights& w, StageGate gate) {
    if (gate.cen && gate.l1) {
        throw ContractError("total_loss: no stage activates both regularizers");
    }
    if (!gate.heatmaps) throw ContractError("total_loss: heatmap losses are always active");
    if (gate.l1 && !net) throw ContractError("total_loss: L1 term requested without a network");
    if (stacks.empty()) throw ContractError("total_loss: no prediction stacks");

    LossBreakdown out;
    TensorPtr total;
    for (const auto& triple : stacks) {
        auto c = focal_loss(triple.corners, target.corners, w.positive_threshold);
        auto e = focal_loss(triple.entry_lines, target.entry_lines, w.positive_threshold);
        auto s = focal_loss(triple.separating_lines, target.separating_lines, w.positive_threshold);
        out.corner += c.loss->data[0];
        out.entry += e.loss->data[0];
        out.sep += s.loss->data[0];
        out.clamped += c.clamped + e.clamped + s.clamped;
        auto stack_total = add(add(c.loss, e.loss), scale(s.loss, w.lambda_sl));
        total = total ? add(total, stack_total) : stack_total;
    }
    if (gate.cen) {
        std::vector<TensorPtr> as;
        for (const auto& [id, a] : alphas) as.push_back(a);
        if (!as.empty()) {
            auto reg = cen_regularizer(as);
            out.cen = reg->data[0];
            total = add(total, scale(reg, w.lambda_cen));
        }
    }
    if (gate.l1) {
        auto reg = l1_regularizer(*net);
        out.l1 = reg->data[0];
        total = add(total, scale(reg, w.lambda_l1));
    }
    out.total = total;
    return out;
}

LossBreakdown total_loss_for_stage(Stage stage, const std::vector<HeatmapTriple>& stacks,
                                   const TargetHeatmaps& target,
                                   const std::vector<std::pair<int, TensorPtr>>& alphas,
                                   const NetworkGraph* net, const LossWeights& w) {
    return total_loss(stacks, target, alphas, net, w, gate_for_stage(stage));
}

// ---- metrics ----------------------------------------------------------------

MatchResult match_points(const std::vector<Point>& ground_truth,
                         const std::vector<Point>& detections, double delta_px) {
    struct Cand {
        double dist;
        int gi, di;
        bool operator<(const Cand& o) const {
            if (dist != o.dist) return dist < o.dist;
            if (gi != o.gi) return gi < o.gi;
            return di < o.di;
        }
    };
    std::vector<Cand> cands;
    for (int gi = 0; gi < static_cast<int>(ground_truth.size()); ++gi) {
        for (int di = 0; di < static_cast<int>(detections.size()); ++di) {
            const double dx = ground_truth[static_cast<std::size_t>(gi)].x -
                              detections[static_cast<std::size_t>(di)].x;
            const double dy = ground_truth[static_cast<std::size_t>(gi)].y -
                              detections[static_cast<std::size_t>(di)].y;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d <= delta_px) cands.push_back({d, gi, di});
        }
    }
    std::sort(cands.begin(), cands.end());

    MatchResult m;
    m.delta_px = delta_px;
    std::vector<char> g_used(ground_truth.size(), 0), d_used(detections.size(), 0);
    for (const auto& c : cands) {
        if (g_used[static_cast<std::size_t>(c.gi)] || d_used[static_cast<std::size_t>(c.di)]) continue;
        g_used[static_cast<std::size_t>(c.gi)] = 1;
        d_used[static_cast<std::size_t>(c.di)] = 1;
        ++m.tp;
        m.errors_px.push_back(c.dist);
    }
    m.fp = static_cast<int>(detections.size()) - m.tp;
    m.fn = static_cast<int>(ground_truth.size()) - m.tp;
    return m;
}

double precision(const MatchResult& m) {
    if (m.tp + m.fp == 0) return 1.0;
    return static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
}

double recall(const MatchResult& m) {
    if (m.tp + m.fn == 0) return 1.0;
    return static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
}

LocStats localization_error_px(const MatchResult& m) {
    LocStats s;
    if (m.errors_px.empty()) return s;
    s.defined = true;
    double mean = 0.0;
    for (double e : m.errors_px) mean += e;
    mean /= static_cast<double>(m.errors_px.size());
    double var = 0.0;
    for (double e : m.errors_px) var += (e - mean) * (e - mean);
    var /= static_cast<double>(m.errors_px.size());
    s.mean = mean;
    s.stddev = std::sqrt(var);
    return s;
}

LocStats localization_error_cm(const MatchResult& m, double cm_per_px) {
    LocStats s = localization_error_px(m);
    s.mean *= cm_per_px;
    s.stddev *= cm_per_px;
    return s;
}

}  // namespace sphg
