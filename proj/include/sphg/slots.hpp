#pragma once

// Rule-based slot assembly from the three heatmaps: corner peaks (NMS +
// sub-pixel refinement), entrance-corner pairing under distance and corridor
// rules, line verification by mean heatmap score along hypothesized
// directions at 90/45/135 degrees, and overlap resolution by confidence.

#include <vector>

#include "sphg/loss.hpp"
#include "sphg/tensor.hpp"

namespace sphg {

struct Heatmap {
    int h = 0, w = 0;
    std::vector<double> v;

    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    double bilinear(double x, double y) const;
    bool in_bounds(double x, double y) const { return x >= 0 && y >= 0 && x <= w - 1 && y <= h - 1; }
};

// Channel c of batch row b as a 2-D heatmap.
Heatmap heatmap_from(const TensorPtr& t, int b = 0, int c = 0);

struct CornerPeak {
    double x = 0.0, y = 0.0;
    double score = 0.0;
};

struct SlotDetection {
    Point p1, p2;             // entrance corners
    double entry_score = 0.0;
    int angle_deg = 90;       // 90, 45 or 135 between entry and separating lines
    int side = 1;             // +1: slot body left of p1->p2, -1: right
    double sep_score = 0.0;   // min of the two separating-line scores
    double confidence = 0.0;
};

struct InferParams {
    double peak_threshold = 0.3;
    double line_threshold = 0.25;
    double nms_radius = 5.0;
    double corridor_width = 4.0;
    double d_min = 10.0;
    double d_max = 24.0;
    double probe_factor = 1.5;  // separating probe length = factor * entrance width
};

// Strict 3x3 local maxima >= threshold, kept greedily in descending score with
// NMS exclusion, then refined by a per-axis quadratic fit.
std::vector<CornerPeak> find_peaks(const Heatmap& corner_map, double threshold, double nms_radius);

// Unordered index pairs with distance in [d_min, d_max] and no third peak
// inside the corridor around the connecting segment.
std::vector<std::pair<int, int>> pair_corners(const std::vector<CornerPeak>& peaks,
                                              const InferParams& p);

// Mean of bilinear samples at 1 px steps from start along dir (unit vector)
// for the given length. Out-of-bounds samples are skipped; segments with less
// than 60% of samples in bounds score 0.
double line_score(const Heatmap& map, Point start, Point dir, double length);

std::vector<SlotDetection> assemble_slots(const std::vector<CornerPeak>& peaks,
                                          const std::vector<std::pair<int, int>>& pairs,
                                          const Heatmap& entry_map, const Heatmap& sep_map,
                                          const InferParams& p);

// find_peaks + pair_corners + assemble_slots.
std::vector<SlotDetection> infer_slots(const Heatmap& corner_map, const Heatmap& entry_map,
                                       const Heatmap& sep_map, const InferParams& p);

// Direction of the separating line for a slot through (angle, side), given the
// normalized entry direction d = (p2-p1)/|p2-p1|. Shared by the generator and
// the inference so both agree on geometry.
Point separating_direction(Point entry_dir, int angle_deg, int side);

}  // namespace sphg
