#pragma once

// Focal heatmap loss, the total training objective with per-stage gating, and
// the corner-level evaluation metrics (greedy matching at a distance
// tolerance, localization error, precision/recall).

#include <cstdint>
#include <vector>

#include "sphg/network.hpp"

namespace sphg {

// Target maps share the head layout; corners are Gaussian splats with peak
// exactly 1 at the annotated pixel, lines have a Gaussian cross-section.
struct TargetHeatmaps {
    TensorPtr corners;
    TensorPtr entry_lines;
    TensorPtr separating_lines;
};

struct FocalResult {
    TensorPtr loss;           // scalar, mean over all elements
    std::int64_t clamped = 0;  // predictions that had to be clamped into (0,1)
};

// Per pixel: positives (y >= positive_threshold) contribute -(1-p)^2 log p,
// the rest contribute -(1-y)^4 p^2 log(1-p). Predictions are clamped to
// [1e-6, 1-1e-6] and the clamp count reported.
FocalResult focal_loss(const TensorPtr& pred, const TensorPtr& target,
                       double positive_threshold = 0.95);

enum class Stage : std::uint8_t { Warmup = 0, CenPretrain = 1, Select = 2, Prune = 3, Finetune = 4 };
const char* stage_name(Stage s);

struct StageGate {
    bool heatmaps = true;
    bool cen = false;
    bool l1 = false;
};
StageGate gate_for_stage(Stage s);

struct LossWeights {
    double lambda_sl = 0.1;
    double lambda_cen = 0.05;
    double lambda_l1 = 0.05;
    double positive_threshold = 0.95;
};

struct LossBreakdown {
    TensorPtr total;
    double corner = 0.0, entry = 0.0, sep = 0.0;  // raw focal means, summed over stacks
    double cen = 0.0, l1 = 0.0;                   // raw regularizer values
    std::int64_t clamped = 0;
};

// L = sum_stacks [L_corner + L_entry + lambda_sl * L_sep]
//     + lambda_cen * L_CEN + lambda_l1 * L1, with terms gated per stage.
// net may be null when the gate has no L1 term.
LossBreakdown total_loss(const std::vector<HeatmapTriple>& stacks, const TargetHeatmaps& target,
                         const std::vector<std::pair<int, TensorPtr>>& alphas,
                         const NetworkGraph* net, const LossWeights& w, StageGate gate);

// Derives the gate from the stage; requesting terms outside the stage's gate
// is a contract violation by construction.
LossBreakdown total_loss_for_stage(Stage stage, const std::vector<HeatmapTriple>& stacks,
                                   const TargetHeatmaps& target,
                                   const std::vector<std::pair<int, TensorPtr>>& alphas,
                                   const NetworkGraph* net, const LossWeights& w);

// ---- metrics ----------------------------------------------------------------

struct Point {
    double x = 0.0, y = 0.0;
};

struct MatchResult {
    int tp = 0, fp = 0, fn = 0;
    std::vector<double> errors_px;  // matched distances
    double delta_px = 0.0;
};

// Greedy nearest-first matching; each ground-truth and detection used once.
MatchResult match_points(const std::vector<Point>& ground_truth,
                         const std::vector<Point>& detections, double delta_px);

// No detections and no ground truth count as perfect.
double precision(const MatchResult& m);
double recall(const MatchResult& m);

struct LocStats {
    bool defined = false;
    double mean = 0.0;
    double stddev = 0.0;  // population std
};
LocStats localization_error_px(const MatchResult& m);
LocStats localization_error_cm(const MatchResult& m, double cm_per_px);

}  // namespace sphg
