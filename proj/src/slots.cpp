#include "sphg/slots.hpp"

#include <algorithm>
#include <cmath>

namespace sphg {

double Heatmap::bilinear(double x, double y) const {
    if (!in_bounds(x, y)) return 0.0;
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    return at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x1) * fx * (1 - fy) +
           at(y1, x0) * (1 - fx) * fy + at(y1, x1) * fx * fy;
}

Heatmap heatmap_from(const TensorPtr& t, int b, int c) {
    if (t->ndim() != 4) throw ConfigError("heatmap_from expects [B,C,H,W]");
    Heatmap hm;
    hm.h = t->dim(2);
    hm.w = t->dim(3);
    hm.v.resize(static_cast<std::size_t>(hm.h) * hm.w);
    const double* src =
        t->data.data() + (static_cast<std::int64_t>(b) * t->dim(1) + c) * hm.h * hm.w;
    std::copy(src, src + hm.v.size(), hm.v.begin());
    return hm;
}

std::vector<CornerPeak> find_peaks(const Heatmap& m, double threshold, double nms_radius) {
    std::vector<CornerPeak> raw;
    for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) {
            const double v = m.at(y, x);
            if (v < threshold) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= m.h || nx >= m.w) continue;
                    if (m.at(ny, nx) >= v) {
                        is_max = false;
                        break;
                    }
                }
            }
            if (is_max) raw.push_back({static_cast<double>(x), static_cast<double>(y), v});
        }
    }
    std::sort(raw.begin(), raw.end(), [](const CornerPeak& a, const CornerPeak& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    std::vector<CornerPeak> kept;
    for (const auto& p : raw) {
        bool ok = true;
        for (const auto& q : kept) {
            const double d = std::hypot(p.x - q.x, p.y - q.y);
            if (d < nms_radius) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(p);
    }

    // sub-pixel refinement: per-axis quadratic fit on the 3x3 patch
    for (auto& p : kept) {
        const int x = static_cast<int>(p.x);
        const int y = static_cast<int>(p.y);
        if (x > 0 && x < m.w - 1) {
            const double denom = m.at(y, x - 1) - 2.0 * m.at(y, x) + m.at(y, x + 1);
            if (denom < -1e-12) {
                p.x += std::clamp(0.5 * (m.at(y, x - 1) - m.at(y, x + 1)) / denom, -0.5, 0.5);
            }
        }
        if (y > 0 && y < m.h - 1) {
            const double denom = m.at(y - 1, x) - 2.0 * m.at(y, x) + m.at(y + 1, x);
            if (denom < -1e-12) {
                p.y += std::clamp(0.5 * (m.at(y - 1, x) - m.at(y + 1, x)) / denom, -0.5, 0.5);
            }
        }
    }
    return kept;
}

std::vector<std::pair<int, int>> pair_corners(const std::vector<CornerPeak>& peaks,
                                              const InferParams& prm) {
    std::vector<std::pair<int, int>> pairs;
    const int n = static_cast<int>(peaks.size());
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double dx = peaks[static_cast<std::size_t>(j)].x - peaks[static_cast<std::size_t>(i)].x;
            const double dy = peaks[static_cast<std::size_t>(j)].y - peaks[static_cast<std::size_t>(i)].y;
            const double len = std::hypot(dx, dy);
            if (len < prm.d_min || len > prm.d_max) continue;
            bool blocked = false;
            for (int k = 0; k < n && !blocked; ++k) {
                if (k == i || k == j) continue;
                const double qx = peaks[static_cast<std::size_t>(k)].x - peaks[static_cast<std::size_t>(i)].x;
                const double qy = peaks[static_cast<std::size_t>(k)].y - peaks[static_cast<std::size_t>(i)].y;
                const double t = (qx * dx + qy * dy) / (len * len);
                if (t < 0.0 || t > 1.0) continue;
                const double perp = std::abs(qx * dy - qy * dx) / len;
                if (perp < prm.corridor_width) blocked = true;  // third corner intercepts
            }
            if (!blocked) pairs.emplace_back(i, j);
        }
    }
    return pairs;
}

double line_score(const Heatmap& m, Point start, Point dir, double length) {
    const int steps = static_cast<int>(std::floor(length));
    if (steps < 0) return 0.0;
    int total = 0, inside = 0;
    double sum = 0.0;
    for (int i = 0; i <= steps; ++i) {
        const double x = start.x + dir.x * i;
        const double y = start.y + dir.y * i;
        ++total;
        if (m.in_bounds(x, y)) {
            ++inside;
            sum += m.bilinear(x, y);
        }
    }
    if (inside == 0) return 0.0;
    if (static_cast<double>(inside) / total < 0.6) return 0.0;
    return sum / inside;
}

Point separating_direction(Point entry_dir, int angle_deg, int side) {
    const double phi = static_cast<double>(side) * angle_deg * 3.14159265358979323846 / 180.0;
    const double c = std::cos(phi), s = std::sin(phi);
    return {entry_dir.x * c - entry_dir.y * s, entry_dir.x * s + entry_dir.y * c};
}

std::vector<SlotDetection> assemble_slots(const std::vector<CornerPeak>& peaks,
                                          const std::vector<std::pair<int, int>>& pairs,
                                          const Heatmap& entry_map, const Heatmap& sep_map,
                                          const InferParams& prm) {
    static const int kAngles[3] = {90, 45, 135};
    std::vector<SlotDetection> slots;

    for (const auto& [i, j] : pairs) {
        const auto& a = peaks[static_cast<std::size_t>(i)];
        const auto& b = peaks[static_cast<std::size_t>(j)];
        const double width = std::hypot(b.x - a.x, b.y - a.y);
        const Point d{(b.x - a.x) / width, (b.y - a.y) / width};

        const double entry = line_score(entry_map, {a.x, a.y}, d, width);
        if (entry < prm.line_threshold) continue;

        const double probe = prm.probe_factor * width;
        bool found = false;
        double best_total = 0.0;
        SlotDetection best;
        for (int angle : kAngles) {
            for (int side : {1, -1}) {
                const Point sd = separating_direction(d, angle, side);
                const double s1 = line_score(sep_map, {a.x, a.y}, sd, probe);
                const double s2 = line_score(sep_map, {b.x, b.y}, sd, probe);
                if (s1 < prm.line_threshold || s2 < prm.line_threshold) continue;
                const double total = s1 + s2;
                if (!found || total > best_total) {
                    found = true;
                    best_total = total;
                    best.p1 = {a.x, a.y};
                    best.p2 = {b.x, b.y};
                    best.entry_score = entry;
                    best.angle_deg = angle;
                    best.side = side;
                    best.sep_score = std::min(s1, s2);
                    best.confidence = (a.score + b.score + entry + s1 + s2) / 5.0;
                }
            }
        }
        if (found) slots.push_back(best);
    }

    // overlap resolution: higher-confidence slot wins when entry segments cross
    std::sort(slots.begin(), slots.end(), [](const SlotDetection& a, const SlotDetection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.p1.x != b.p1.x) return a.p1.x < b.p1.x;
        return a.p1.y < b.p1.y;
    });
    auto crosses = [](const SlotDetection& s, const SlotDetection& t) {
        auto orient = [](Point p, Point q, Point r) {
            const double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
            return v > 1e-9 ? 1 : (v < -1e-9 ? -1 : 0);
        };
        const int o1 = orient(s.p1, s.p2, t.p1);
        const int o2 = orient(s.p1, s.p2, t.p2);
        const int o3 = orient(t.p1, t.p2, s.p1);
        const int o4 = orient(t.p1, t.p2, s.p2);
        return o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0 && o1 != o2 && o3 != o4;
    };
    std::vector<SlotDetection> kept;
    for (const auto& s : slots) {
        bool ok = true;
        for (const auto& k : kept) {
            if (crosses(s, k)) {
                ok = false;
                break;
            }
        }
        if (ok) kept.push_back(s);
    }
    return kept;
}

std::vector<SlotDetection> infer_slots(const Heatmap& corner_map, const Heatmap& entry_map,
                                       const Heatmap& sep_map, const InferParams& prm) {
    const auto peaks = find_peaks(corner_map, prm.peak_threshold, prm.nms_radius);
    const auto pairs = pair_corners(peaks, prm);
    return assemble_slots(peaks, pairs, entry_map, sep_map, prm);
}

}  // namespace sphg
