#pragma once

// Deterministic synthetic BEV parking-scene generator with exact ground
// truth, Gaussian target-heatmap rendering, and the PGM + text-label dataset
// format (images/NNNNN.pgm, labels/NNNNN.txt, split.txt).

#include <cstdint>
#include <string>
#include <vector>

#include "sphg/loss.hpp"
#include "sphg/slots.hpp"

namespace sphg {

// Corner order convention: the slot body lies on side +1 of p1->p2
// (direction rotated by +angle), so labels need no explicit side field.
struct SlotGeom {
    Point p1, p2;
    int angle_deg = 90;  // 90, 45 or 135
    double depth = 16.0;
};

struct Distractor {
    enum class Kind : int { ShadowBand = 0, FalseMarking = 1, OcclusionPatch = 2 };
    Kind kind = Kind::ShadowBand;
    Point a, b;          // band axis / segment / rect corners
    double width = 6.0;
    double strength = 0.4;
};

struct SceneGroundTruth {
    std::vector<SlotGeom> slots;
    std::vector<Point> orphan_corners;
    // slot corners (shared corners deduplicated) plus orphans
    std::vector<Point> all_corners() const;
};

struct SceneSpec {
    int size = 64;
    std::vector<SlotGeom> slots;
    std::vector<Point> orphan_corners;
    double line_width = 1.8;
    double line_brightness = 0.85;
    double noise = 0.02;
    std::uint64_t texture_seed = 0;
    std::vector<Distractor> distractors;
    bool degrade_lines = false;
    double cm_per_px = 4.0;
};

struct Scene {
    int size = 0;
    std::vector<double> image;  // grayscale in [0,1], row-major
    SceneGroundTruth gt;
    double cm_per_px = 4.0;
};

// Renders the given spec; the seed drives texture, noise and degradation.
// Same (spec, seed) always produces the identical image.
Scene generate_scene(const SceneSpec& spec, std::uint64_t seed);

// Random-scene sampler knobs (one slot row of 1..max_slots slots per scene).
struct GeneratorKnobs {
    int size = 64;
    double slot_min_width = 12.0;
    double slot_max_width = 22.0;
    int max_slots = 3;
    double line_width = 1.8;
    double noise = 0.02;
    double distractor_rate = 0.5;
    double orphan_rate = 0.15;
    double cm_per_px = 4.0;
};

SceneSpec sample_scene_spec(const GeneratorKnobs& knobs, Rng& rng);

// Corner Gaussians peak exactly 1 at the rounded corner pixel; line channels
// have a Gaussian cross-section and are rendered separately.
TargetHeatmaps render_heatmap_targets(const SceneGroundTruth& gt, int size,
                                      double corner_sigma = 2.0, double line_sigma = 1.0);

// ---- dataset IO --------------------------------------------------------------

void save_pgm(const std::string& path, const std::vector<double>& image, int size);
std::vector<double> load_pgm(const std::string& path, int& size_out);

void save_labels(const std::string& path, const SceneGroundTruth& gt, int size, double cm_per_px);
SceneGroundTruth load_labels(const std::string& path, int& size_out, double& cm_per_px_out);

struct SplitIndex {
    std::vector<int> train, val;
};

// Explicit counts when given; otherwise the 9527:2138 proportions.
SplitIndex make_split(int n, int train_count, int val_count, std::uint64_t seed);
void save_split(const std::string& path, const SplitIndex& split);
SplitIndex load_split(const std::string& path);

struct Sample {
    int size = 0;
    std::vector<double> image;
    SceneGroundTruth gt;
    double cm_per_px = 4.0;
};

struct DatasetDirs {
    std::string images, labels, split_file;
};
DatasetDirs dataset_paths(const std::string& dir);

// Writes images/, labels/ and split.txt under dir. Returns the split.
SplitIndex generate_dataset(const std::string& dir, const GeneratorKnobs& knobs, int count,
                            int train_count, int val_count, std::uint64_t seed);

struct LoadedDataset {
    std::vector<Sample> train, val;
};
LoadedDataset load_dataset(const std::string& dir);

}  // namespace sphg
