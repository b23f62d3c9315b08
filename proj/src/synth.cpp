#include "sphg/synth.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace sphg {

namespace {

double dist_point_segment(Point q, Point a, Point b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((q.x - a.x) * dx + (q.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double px = a.x + t * dx, py = a.y + t * dy;
    return std::hypot(q.x - px, q.y - py);
}

Point slot_far_corner(const SlotGeom& s, bool from_p2) {
    const double w = std::hypot(s.p2.x - s.p1.x, s.p2.y - s.p1.y);
    const Point d{(s.p2.x - s.p1.x) / w, (s.p2.y - s.p1.y) / w};
    const Point sd = separating_direction(d, s.angle_deg, +1);
    const Point base = from_p2 ? s.p2 : s.p1;
    return {base.x + sd.x * s.depth, base.y + sd.y * s.depth};
}

// max-composited anti-aliased segment
void draw_segment(std::vector<double>& layer, int size, Point a, Point b, double width,
                  double brightness, const std::vector<double>* along_mod = nullptr) {
    const double half = width / 2.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half - 2)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half + 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half - 2)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half + 2)));
    const double seg_len = std::hypot(b.x - a.x, b.y - a.y);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const Point q{static_cast<double>(x), static_cast<double>(y)};
            const double d = dist_point_segment(q, a, b);
            const double cov = std::clamp(half + 0.5 - d, 0.0, 1.0);
            if (cov <= 0.0) continue;
            double v = brightness * cov;
            if (along_mod && seg_len > 0) {
                const double t = ((q.x - a.x) * (b.x - a.x) + (q.y - a.y) * (b.y - a.y)) /
                                 (seg_len * seg_len);
                const double tc = std::clamp(t, 0.0, 1.0);
                const auto& mod = *along_mod;
                const double idx = tc * static_cast<double>(mod.size() - 1);
                const std::size_t i0 = static_cast<std::size_t>(idx);
                const std::size_t i1 = std::min(i0 + 1, mod.size() - 1);
                const double f = idx - static_cast<double>(i0);
                v *= mod[i0] * (1 - f) + mod[i1] * f;
            }
            double& px = layer[static_cast<std::size_t>(y) * size + x];
            px = std::max(px, v);
        }
    }
}

}  // namespace

std::vector<Point> SceneGroundTruth::all_corners() const {
    std::vector<Point> out;
    auto push_unique = [&](Point p) {
        for (const auto& q : out) {
            if (std::hypot(p.x - q.x, p.y - q.y) < 1e-6) return;
        }
        out.push_back(p);
    };
    for (const auto& s : slots) {
        push_unique(s.p1);
        push_unique(s.p2);
    }
    for (const auto& p : orphan_corners) push_unique(p);
    return out;
}

Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
    const int size = spec.size;
    if (size < 8) throw ConfigError("scene size too small");
    const double margin = 1.0;
    auto in_bounds = [&](Point p) {
        return p.x >= margin && p.y >= margin && p.x <= size - 1 - margin && p.y <= size - 1 - margin;
    };
    for (const auto& s : spec.slots) {
        if (s.angle_deg != 90 && s.angle_deg != 45 && s.angle_deg != 135) {
            throw ConfigError("slot angle must be 90, 45 or 135");
        }
        if (!in_bounds(s.p1) || !in_bounds(s.p2) || !in_bounds(slot_far_corner(s, false)) ||
            !in_bounds(slot_far_corner(s, true))) {
            throw ConfigError("slot geometry out of bounds");
        }
    }
    for (const auto& p : spec.orphan_corners) {
        if (!in_bounds(p)) throw ConfigError("orphan corner out of bounds");
    }

    Rng rng(seed ^ spec.texture_seed * 0x9e3779b97f4a7c15ULL);
    Scene scene;
    scene.size = size;
    scene.cm_per_px = spec.cm_per_px;
    scene.gt.slots = spec.slots;
    scene.gt.orphan_corners = spec.orphan_corners;

    // background: base level + a few smooth blobs
    std::vector<double> img(static_cast<std::size_t>(size) * size);
    const double base = 0.26 + 0.10 * rng.uniform();
    std::fill(img.begin(), img.end(), base);
    const int blobs = 3;
    for (int i = 0; i < blobs; ++i) {
        const double cx = rng.uniform(0, size - 1);
        const double cy = rng.uniform(0, size - 1);
        const double sg = rng.uniform(8, 20);
        const double amp = rng.uniform(-0.06, 0.06);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                img[static_cast<std::size_t>(y) * size + x] += amp * std::exp(-r2 / (2 * sg * sg));
            }
        }
    }

    // markings layer
    std::vector<double> marks(img.size(), 0.0);
    auto along_profile = [&](double seg_len) {
        std::vector<double> mod(std::max<std::size_t>(4, static_cast<std::size_t>(seg_len / 3)));
        double v = rng.uniform(0.35, 1.0);
        for (auto& m : mod) {
            v = std::clamp(v + rng.uniform(-0.35, 0.35), 0.25, 1.0);
            m = v;
        }
        return mod;
    };
    for (const auto& s : spec.slots) {
        const double w = std::hypot(s.p2.x - s.p1.x, s.p2.y - s.p1.y);
        const Point d{(s.p2.x - s.p1.x) / w, (s.p2.y - s.p1.y) / w};
        const Point sd = separating_direction(d, s.angle_deg, +1);
        const Point q1{s.p1.x + sd.x * s.depth, s.p1.y + sd.y * s.depth};
        const Point q2{s.p2.x + sd.x * s.depth, s.p2.y + sd.y * s.depth};
        std::vector<double> mod;
        const std::vector<double>* modp = nullptr;
        if (spec.degrade_lines) {
            mod = along_profile(w);
            modp = &mod;
        }
        draw_segment(marks, size, s.p1, s.p2, spec.line_width, spec.line_brightness, modp);
        if (spec.degrade_lines) mod = along_profile(s.depth);
        draw_segment(marks, size, s.p1, q1, spec.line_width, spec.line_brightness, modp);
        if (spec.degrade_lines) mod = along_profile(s.depth);
        draw_segment(marks, size, s.p2, q2, spec.line_width, spec.line_brightness, modp);
    }
    // orphan corners look like junctions: two short stubs meeting at the point
    for (const auto& p : spec.orphan_corners) {
        const double phi = rng.uniform(0, 6.283185307179586);
        const double len = rng.uniform(5.0, 8.0);
        const Point d1{std::cos(phi), std::sin(phi)};
        const Point d2{-d1.y, d1.x};
        auto clip = [&](Point q) {
            q.x = std::clamp(q.x, margin, size - 1 - margin);
            q.y = std::clamp(q.y, margin, size - 1 - margin);
            return q;
        };
        draw_segment(marks, size, p, clip({p.x + d1.x * len, p.y + d1.y * len}), spec.line_width,
                     spec.line_brightness);
        draw_segment(marks, size, p, clip({p.x + d2.x * len, p.y + d2.y * len}), spec.line_width,
                     spec.line_brightness);
    }
    // misleading markings: bright segments that belong to no slot
    for (const auto& dis : spec.distractors) {
        if (dis.kind == Distractor::Kind::FalseMarking) {
            draw_segment(marks, size, dis.a, dis.b, spec.line_width, spec.line_brightness * 0.95);
        }
    }

    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::max(img[i], marks[i]);

    // shadows and occlusions apply over markings
    for (const auto& dis : spec.distractors) {
        if (dis.kind == Distractor::Kind::ShadowBand) {
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    const double d = dist_point_segment({static_cast<double>(x), static_cast<double>(y)},
                                                        dis.a, dis.b);
                    if (d < dis.width) {
                        const double f = 1.0 - dis.strength * std::clamp(1.0 - d / dis.width, 0.0, 1.0);
                        img[static_cast<std::size_t>(y) * size + x] *= f;
                    }
                }
            }
        } else if (dis.kind == Distractor::Kind::OcclusionPatch) {
            const int px0 = std::max(0, static_cast<int>(std::min(dis.a.x, dis.b.x)));
            const int px1 = std::min(size - 1, static_cast<int>(std::max(dis.a.x, dis.b.x)));
            const int py0 = std::max(0, static_cast<int>(std::min(dis.a.y, dis.b.y)));
            const int py1 = std::min(size - 1, static_cast<int>(std::max(dis.a.y, dis.b.y)));
            const double fill = 0.12 + 0.5 * rng.uniform();
            for (int y = py0; y <= py1; ++y) {
                for (int x = px0; x <= px1; ++x) {
                    img[static_cast<std::size_t>(y) * size + x] = fill;
                }
            }
        }
    }

    if (spec.noise > 0) {
        for (auto& v : img) v += rng.gaussian() * spec.noise;
    }
    for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
    scene.image = std::move(img);
    return scene;
}

SceneSpec sample_scene_spec(const GeneratorKnobs& knobs, Rng& rng) {
    const int size = knobs.size;
    const double margin = 3.0;
    auto fits = [&](Point p) {
        return p.x >= margin && p.y >= margin && p.x <= size - 1 - margin &&
               p.y <= size - 1 - margin;
    };

    SceneSpec spec;
    spec.size = size;
    spec.line_width = knobs.line_width;
    spec.noise = knobs.noise;
    spec.cm_per_px = knobs.cm_per_px;
    spec.texture_seed = rng.next_u64();
    spec.line_brightness = rng.uniform(0.75, 0.95);

    // one row of slots; retry until the whole row (with depth) fits
    for (int attempt = 0; attempt < 400 && spec.slots.empty(); ++attempt) {
        const int want = 1 + static_cast<int>(rng.uniform_int(0, knobs.max_slots - 1));
        const int angle = std::array<int, 3>{90, 45, 135}[rng.uniform_int(0, 2)];
        const double phi = rng.uniform(0, 6.283185307179586);
        const Point dir{std::cos(phi), std::sin(phi)};
        Point cur{rng.uniform(margin, size - 1 - margin), rng.uniform(margin, size - 1 - margin)};

        std::vector<SlotGeom> row;
        bool ok = true;
        for (int k = 0; k < want && ok; ++k) {
            const double w = rng.uniform(knobs.slot_min_width, knobs.slot_max_width);
            const double depth = rng.uniform(0.7, 1.1) * w;
            SlotGeom s;
            s.p1 = cur;
            s.p2 = {cur.x + dir.x * w, cur.y + dir.y * w};
            s.angle_deg = angle;
            s.depth = depth;
            if (!fits(s.p1) || !fits(s.p2) || !fits(slot_far_corner(s, false)) ||
                !fits(slot_far_corner(s, true)) || depth < 0.6 * w) {
                ok = false;
                break;
            }
            row.push_back(s);
            cur = s.p2;
        }
        if (ok && !row.empty()) spec.slots = std::move(row);
    }

    // corners that belong to no slot, kept clear of entry segments so the
    // corridor rule can never veto a real slot
    if (rng.uniform() < knobs.orphan_rate) {
        for (int attempt = 0; attempt < 60; ++attempt) {
            Point p{rng.uniform(margin + 2, size - 3 - margin), rng.uniform(margin + 2, size - 3 - margin)};
            bool ok = true;
            for (const auto& s : spec.slots) {
                if (dist_point_segment(p, s.p1, s.p2) < 12.0) ok = false;
                if (dist_point_segment(p, s.p1, slot_far_corner(s, false)) < 6.0) ok = false;
                if (dist_point_segment(p, s.p2, slot_far_corner(s, true)) < 6.0) ok = false;
            }
            for (const auto& q : spec.orphan_corners) {
                if (std::hypot(p.x - q.x, p.y - q.y) < 12.0) ok = false;
            }
            if (ok) {
                spec.orphan_corners.push_back(p);
                break;
            }
        }
    }

    if (rng.uniform() < knobs.distractor_rate) {
        const int kinds = static_cast<int>(rng.uniform_int(1, 2));
        for (int k = 0; k < kinds; ++k) {
            const int which = static_cast<int>(rng.uniform_int(0, 3));
            if (which == 0) {
                Distractor d;
                d.kind = Distractor::Kind::ShadowBand;
                d.a = {rng.uniform(0, size - 1), rng.uniform(0, size - 1)};
                const double phi = rng.uniform(0, 6.283185307179586);
                d.b = {d.a.x + std::cos(phi) * size, d.a.y + std::sin(phi) * size};
                d.width = rng.uniform(5, 12);
                d.strength = rng.uniform(0.2, 0.45);
                spec.distractors.push_back(d);
            } else if (which == 1) {
                // a marking segment away from every slot corner
                for (int attempt = 0; attempt < 40; ++attempt) {
                    Point a{rng.uniform(margin, size - 1 - margin),
                            rng.uniform(margin, size - 1 - margin)};
                    const double phi = rng.uniform(0, 6.283185307179586);
                    const double len = rng.uniform(10, 22);
                    Point b{std::clamp(a.x + std::cos(phi) * len, margin, size - 1 - margin),
                            std::clamp(a.y + std::sin(phi) * len, margin, size - 1 - margin)};
                    bool ok = true;
                    for (const auto& s : spec.slots) {
                        for (const auto& c : {s.p1, s.p2}) {
                            if (dist_point_segment(c, a, b) < 7.0) ok = false;
                        }
                        if (dist_point_segment(a, s.p1, s.p2) < 5.0) ok = false;
                        if (dist_point_segment(b, s.p1, s.p2) < 5.0) ok = false;
                    }
                    for (const auto& c : spec.orphan_corners) {
                        if (dist_point_segment(c, a, b) < 7.0) ok = false;
                    }
                    if (ok) {
                        Distractor d;
                        d.kind = Distractor::Kind::FalseMarking;
                        d.a = a;
                        d.b = b;
                        spec.distractors.push_back(d);
                        break;
                    }
                }
            } else if (which == 2) {
                for (int attempt = 0; attempt < 40; ++attempt) {
                    Point a{rng.uniform(margin, size - 12), rng.uniform(margin, size - 12)};
                    Point b{a.x + rng.uniform(5, 10), a.y + rng.uniform(5, 10)};
                    bool ok = true;
                    for (const auto& s : spec.slots) {
                        for (const auto& c : {s.p1, s.p2}) {
                            if (c.x >= a.x - 8 && c.x <= b.x + 8 && c.y >= a.y - 8 && c.y <= b.y + 8) {
                                ok = false;
                            }
                        }
                    }
                    for (const auto& c : spec.orphan_corners) {
                        if (c.x >= a.x - 8 && c.x <= b.x + 8 && c.y >= a.y - 8 && c.y <= b.y + 8) {
                            ok = false;
                        }
                    }
                    if (ok) {
                        Distractor d;
                        d.kind = Distractor::Kind::OcclusionPatch;
                        d.a = a;
                        d.b = b;
                        spec.distractors.push_back(d);
                        break;
                    }
                }
            } else {
                spec.degrade_lines = true;
            }
        }
    }
    return spec;
}

TargetHeatmaps render_heatmap_targets(const SceneGroundTruth& gt, int size, double corner_sigma,
                                      double line_sigma) {
    auto corners = Tensor::zeros({1, 1, size, size});
    auto entry = Tensor::zeros({1, 1, size, size});
    auto sep = Tensor::zeros({1, 1, size, size});

    auto splat = [&](TensorPtr& map, Point p) {
        const int cx = static_cast<int>(std::lround(p.x));
        const int cy = static_cast<int>(std::lround(p.y));
        const int r = static_cast<int>(std::ceil(3 * corner_sigma)) + 1;
        for (int y = std::max(0, cy - r); y <= std::min(size - 1, cy + r); ++y) {
            for (int x = std::max(0, cx - r); x <= std::min(size - 1, cx + r); ++x) {
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double v = std::exp(-r2 / (2 * corner_sigma * corner_sigma));
                double& px = map->data[static_cast<std::size_t>(y) * size + x];
                px = std::max(px, v);
            }
        }
    };
    auto line = [&](TensorPtr& map, Point a, Point b) {
        const int r = static_cast<int>(std::ceil(3 * line_sigma)) + 1;
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x))) - r);
        const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.x, b.x))) + r);
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y))) - r);
        const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.y, b.y))) + r);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double d =
                    dist_point_segment({static_cast<double>(x), static_cast<double>(y)}, a, b);
                const double v = std::exp(-d * d / (2 * line_sigma * line_sigma));
                double& px = map->data[static_cast<std::size_t>(y) * size + x];
                px = std::max(px, v);
            }
        }
    };

    for (const auto& p : gt.all_corners()) splat(corners, p);
    for (const auto& s : gt.slots) {
        line(entry, s.p1, s.p2);
        line(sep, s.p1, slot_far_corner(s, false));
        line(sep, s.p2, slot_far_corner(s, true));
    }
    return {corners, entry, sep};
}

// ---- dataset IO --------------------------------------------------------------

void save_pgm(const std::string& path, const std::vector<double>& image, int size) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    f << "P5\n" << size << " " << size << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> load_pgm(const std::string& path, int& size_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open: " + path);
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < content.size() &&
               (std::isspace(static_cast<unsigned char>(content[pos])) || content[pos] == '#')) {
            if (content[pos] == '#') {
                while (pos < content.size() && content[pos] != '\n') ++pos;
            } else {
                ++pos;
            }
        }
    };
    auto read_token = [&]() -> std::string {
        skip_ws();
        const std::size_t start = pos;
        while (pos < content.size() && !std::isspace(static_cast<unsigned char>(content[pos]))) ++pos;
        if (start == pos) throw ParseError("unexpected end of PGM header", start);
        return content.substr(start, pos - start);
    };

    if (read_token() != "P5") throw ParseError("not a binary PGM (P5)", 0);
    int w, h, maxval;
    try {
        w = std::stoi(read_token());
        h = std::stoi(read_token());
        const std::size_t at = pos;
        maxval = std::stoi(read_token());
        if (maxval != 255) throw ParseError("PGM maxval must be 255", at);
    } catch (const std::invalid_argument&) {
        throw ParseError("malformed PGM header", pos);
    }
    if (w != h || w <= 0) throw ParseError("PGM must be square", 0);
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h;
    if (content.size() - pos < need) throw ParseError("truncated PGM pixel data", content.size());
    std::vector<double> img(need);
    for (std::size_t i = 0; i < need; ++i) {
        img[i] = static_cast<unsigned char>(content[pos + i]) / 255.0;
    }
    size_out = w;
    return img;
}

void save_labels(const std::string& path, const SceneGroundTruth& gt, int size, double cm_per_px) {
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    char buf[256];
    f << "# sphg labels v1\n";
    std::snprintf(buf, sizeof buf, "size %d %d\n", size, size);
    f << buf;
    std::snprintf(buf, sizeof buf, "scale %.17g\n", cm_per_px);
    f << buf;
    for (const auto& s : gt.slots) {
        std::snprintf(buf, sizeof buf, "slot %.17g %.17g %.17g %.17g %d %.17g\n", s.p1.x, s.p1.y,
                      s.p2.x, s.p2.y, s.angle_deg, s.depth);
        f << buf;
    }
    for (const auto& p : gt.orphan_corners) {
        std::snprintf(buf, sizeof buf, "corner %.17g %.17g\n", p.x, p.y);
        f << buf;
    }
}

SceneGroundTruth load_labels(const std::string& path, int& size_out, double& cm_per_px_out) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("cannot open: " + path);
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    SceneGroundTruth gt;
    size_out = 0;
    cm_per_px_out = 0.0;
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < content.size()) {
        const std::size_t line_start = pos;
        std::size_t eol = content.find('\n', pos);
        if (eol == std::string::npos) eol = content.size();
        const std::string line = content.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (line.empty() || line[0] == '#') continue;

        char kind[16];
        if (std::sscanf(line.c_str(), "%15s", kind) != 1) {
            throw ParseError("unreadable record", line_start);
        }
        if (std::strcmp(kind, "size") == 0) {
            int w = 0, h = 0;
            if (std::sscanf(line.c_str(), "size %d %d", &w, &h) != 2 || w != h || w <= 0) {
                throw ParseError("bad size record", line_start);
            }
            size_out = w;
        } else if (std::strcmp(kind, "scale") == 0) {
            if (std::sscanf(line.c_str(), "scale %lg", &cm_per_px_out) != 1 || cm_per_px_out <= 0) {
                throw ParseError("bad scale record", line_start);
            }
        } else if (std::strcmp(kind, "slot") == 0) {
            SlotGeom s;
            if (std::sscanf(line.c_str(), "slot %lg %lg %lg %lg %d %lg", &s.p1.x, &s.p1.y, &s.p2.x,
                            &s.p2.y, &s.angle_deg, &s.depth) != 6) {
                throw ParseError("truncated slot record", line_start);
            }
            if (s.angle_deg != 90 && s.angle_deg != 45 && s.angle_deg != 135) {
                throw ParseError("slot angle must be 90, 45 or 135", line_start);
            }
            gt.slots.push_back(s);
        } else if (std::strcmp(kind, "corner") == 0) {
            Point p;
            if (std::sscanf(line.c_str(), "corner %lg %lg", &p.x, &p.y) != 2) {
                throw ParseError("truncated corner record", line_start);
            }
            gt.orphan_corners.push_back(p);
        } else {
            throw ParseError(std::string("unknown record '") + kind + "'", line_start);
        }
    }
    if (size_out == 0) throw ParseError("label file missing size header", 0);
    if (cm_per_px_out == 0.0) throw ParseError("label file missing scale header", 0);
    return gt;
}

SplitIndex make_split(int n, int train_count, int val_count, std::uint64_t seed) {
    if (train_count == 0 && val_count == 0) {
        val_count = static_cast<int>(std::lround(static_cast<double>(n) * 2138.0 / 11665.0));
        train_count = n - val_count;
    }
    if (train_count + val_count > n || train_count < 0 || val_count < 0) {
        throw ConfigError("split counts exceed dataset size");
    }
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    SplitIndex split;
    split.train.assign(idx.begin(), idx.begin() + train_count);
    split.val.assign(idx.begin() + train_count, idx.begin() + train_count + val_count);
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

void save_split(const std::string& path, const SplitIndex& split) {
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    for (int i : split.train) f << i << " train\n";
    for (int i : split.val) f << i << " val\n";
}

SplitIndex load_split(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("cannot open: " + path);
    SplitIndex split;
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    while (pos < content.size()) {
        const std::size_t line_start = pos;
        std::size_t eol = content.find('\n', pos);
        if (eol == std::string::npos) eol = content.size();
        const std::string line = content.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        int idx;
        char tag[8];
        if (std::sscanf(line.c_str(), "%d %7s", &idx, tag) != 2) {
            throw ParseError("bad split record", line_start);
        }
        if (std::strcmp(tag, "train") == 0) {
            split.train.push_back(idx);
        } else if (std::strcmp(tag, "val") == 0) {
            split.val.push_back(idx);
        } else {
            throw ParseError("split tag must be train or val", line_start);
        }
    }
    return split;
}

DatasetDirs dataset_paths(const std::string& dir) {
    return {dir + "/images", dir + "/labels", dir + "/split.txt"};
}

namespace {
std::string index_name(int i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05d.%s", i, ext);
    return buf;
}
}  // namespace

SplitIndex generate_dataset(const std::string& dir, const GeneratorKnobs& knobs, int count,
                            int train_count, int val_count, std::uint64_t seed) {
    namespace fs = std::filesystem;
    const auto paths = dataset_paths(dir);
    fs::create_directories(paths.images);
    fs::create_directories(paths.labels);

    for (int i = 0; i < count; ++i) {
        const std::uint64_t scene_seed =
            seed ^ (static_cast<std::uint64_t>(i) * 0x9e3779b97f4a7c15ULL + 0x51ed2701ULL);
        Rng rng(scene_seed);
        const auto spec = sample_scene_spec(knobs, rng);
        const auto scene = generate_scene(spec, rng.next_u64());
        save_pgm(paths.images + "/" + index_name(i, "pgm"), scene.image, scene.size);
        save_labels(paths.labels + "/" + index_name(i, "txt"), scene.gt, scene.size,
                    scene.cm_per_px);
    }
    const auto split = make_split(count, train_count, val_count, seed ^ 0xabcdef12345ULL);
    save_split(paths.split_file, split);
    return split;
}

LoadedDataset load_dataset(const std::string& dir) {
    const auto paths = dataset_paths(dir);
    const auto split = load_split(paths.split_file);
    LoadedDataset out;
    auto load_one = [&](int i) {
        Sample s;
        s.image = load_pgm(paths.images + "/" + index_name(i, "pgm"), s.size);
        int lsize = 0;
        s.gt = load_labels(paths.labels + "/" + index_name(i, "txt"), lsize, s.cm_per_px);
        if (lsize != s.size) throw ConfigError("image/label size mismatch for sample " + std::to_string(i));
        return s;
    };
    for (int i : split.train) out.train.push_back(load_one(i));
    for (int i : split.val) out.val.push_back(load_one(i));
    return out;
}

}  // namespace sphg
