#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sphg/slots.hpp"
#include "sphg/synth.hpp"
#include "test_util.hpp"

using namespace sphg;
using namespace sphg_test;

namespace {
namespace fs = std::filesystem;

std::string temp_dir(const char* tag) {
    const auto dir = fs::temp_directory_path() / (std::string("sphg_test_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}
}  // namespace

TEST_CASE("empty spec renders pure background with zero corners") {
    SceneSpec spec;
    spec.size = 64;
    spec.noise = 0.0;
    auto scene = generate_scene(spec, 42);
    CHECK(scene.gt.all_corners().empty());
    CHECK(scene.gt.slots.empty());
    // background only: no pixel reaches marking brightness
    for (double v : scene.image) CHECK(v < 0.6);
}

TEST_CASE("one 90-degree slot with zero noise reports exact ground truth") {
    SceneSpec spec;
    spec.size = 64;
    spec.noise = 0.0;
    spec.slots.push_back({{20.0, 30.0}, {36.0, 30.0}, 90, 14.0});
    auto scene = generate_scene(spec, 7);
    REQUIRE(scene.gt.slots.size() == 1);
    CHECK(scene.gt.slots[0].p1.x == 20.0);
    CHECK(scene.gt.slots[0].p1.y == 30.0);
    CHECK(scene.gt.slots[0].p2.x == 36.0);
    CHECK(scene.gt.slots[0].angle_deg == 90);
    // the markings are visible in the image near the entry line
    double on_line = 0.0;
    for (int x = 22; x <= 34; ++x) on_line = std::max(on_line, scene.image[30 * 64 + x]);
    CHECK(on_line > 0.6);
}

TEST_CASE("same seed gives byte-identical images, different seeds differ") {
    GeneratorKnobs knobs;
    Rng rng1(99), rng2(99), rng3(100);
    auto spec1 = sample_scene_spec(knobs, rng1);
    auto spec2 = sample_scene_spec(knobs, rng2);
    auto spec3 = sample_scene_spec(knobs, rng3);
    auto a = generate_scene(spec1, 5);
    auto b = generate_scene(spec2, 5);
    CHECK(a.image == b.image);
    auto c = generate_scene(spec3, 6);
    CHECK(a.image != c.image);
}

TEST_CASE("out-of-bounds geometry is rejected") {
    SceneSpec spec;
    spec.size = 64;
    spec.slots.push_back({{50.0, 30.0}, {70.0, 30.0}, 90, 14.0});
    CHECK_THROWS_AS(generate_scene(spec, 1), ConfigError);

    SceneSpec deep;
    deep.size = 64;
    // corners fit but the far corners run off the bottom
    deep.slots.push_back({{20.0, 55.0}, {36.0, 55.0}, 90, 30.0});
    CHECK_THROWS_AS(generate_scene(deep, 1), ConfigError);

    SceneSpec bad_angle;
    bad_angle.size = 64;
    bad_angle.slots.push_back({{20.0, 30.0}, {36.0, 30.0}, 60, 14.0});
    CHECK_THROWS_AS(generate_scene(bad_angle, 1), ConfigError);
}

TEST_CASE("target heatmaps") {
    SUBCASE("single corner: argmax at the pixel, value exactly 1") {
        SceneGroundTruth gt;
        gt.orphan_corners.push_back({20.3, 30.6});
        auto maps = render_heatmap_targets(gt, 64, 2.0, 1.0);
        const auto& d = maps.corners->data;
        std::size_t argmax = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (d[i] > d[argmax]) argmax = i;
        }
        CHECK(argmax == 31 * 64 + 20);  // rounded center
        CHECK(d[argmax] == 1.0);
        for (double v : d) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }

    SUBCASE("two corners 40 px apart: two unit peaks, negligible overlap") {
        SceneGroundTruth gt;
        gt.orphan_corners.push_back({10, 10});
        gt.orphan_corners.push_back({50, 10});
        auto maps = render_heatmap_targets(gt, 64, 2.0, 1.0);
        CHECK(maps.corners->data[10 * 64 + 10] == 1.0);
        CHECK(maps.corners->data[10 * 64 + 50] == 1.0);
        // Gaussian tail at 20 px (midpoint) is < 1e-8
        CHECK(maps.corners->data[10 * 64 + 30] < 1e-8);
    }

    SUBCASE("entry lines are not rendered into the separating channel and vice versa") {
        SceneGroundTruth gt;
        gt.slots.push_back({{16, 20}, {32, 20}, 90, 16});
        auto maps = render_heatmap_targets(gt, 64, 2.0, 1.0);
        // midpoint of the entry line
        CHECK(maps.entry_lines->data[20 * 64 + 24] == doctest::Approx(1.0));
        CHECK(maps.separating_lines->data[20 * 64 + 24] < 1e-6);
        // midpoint of a separating line (runs from (16,20) toward +y)
        CHECK(maps.separating_lines->data[28 * 64 + 16] == doctest::Approx(1.0));
        CHECK(maps.entry_lines->data[28 * 64 + 16] < 1e-3);
    }
}

TEST_CASE("pgm round-trip") {
    const auto dir = temp_dir("pgm");
    Rng rng(5);
    std::vector<double> img(32 * 32);
    for (auto& v : img) v = rng.uniform();
    save_pgm(dir + "/a.pgm", img, 32);
    int size = 0;
    auto loaded = load_pgm(dir + "/a.pgm", size);
    CHECK(size == 32);
    for (std::size_t i = 0; i < img.size(); ++i) {
        CHECK(std::abs(loaded[i] - img[i]) <= 0.5 / 255.0 + 1e-12);  // 8-bit quantization
    }
    // loading the save of the load is exact (fixed point)
    save_pgm(dir + "/b.pgm", loaded, 32);
    int size2 = 0;
    auto again = load_pgm(dir + "/b.pgm", size2);
    CHECK(again == loaded);
}

TEST_CASE("pgm parse errors carry byte offsets") {
    const auto dir = temp_dir("pgmbad");
    {
        std::ofstream f(dir + "/bad.pgm", std::ios::binary);
        f << "P5\n8 8\n255\n";
        f << "short";  // 5 bytes instead of 64
    }
    int size = 0;
    CHECK_THROWS_AS(load_pgm(dir + "/bad.pgm", size), ParseError);
    {
        std::ofstream f(dir + "/notpgm.pgm", std::ios::binary);
        f << "P6\n8 8\n255\n";
    }
    CHECK_THROWS_AS(load_pgm(dir + "/notpgm.pgm", size), ParseError);
    CHECK_THROWS_AS(load_pgm(dir + "/absent.pgm", size), MissingInputError);
}

TEST_CASE("label round-trip is exact") {
    const auto dir = temp_dir("labels");
    SceneGroundTruth gt;
    gt.slots.push_back({{20.125, 30.5}, {36.75, 31.25}, 45, 14.0625});
    gt.slots.push_back({{10.0, 50.0}, {26.5, 50.0}, 90, 12.5});
    gt.orphan_corners.push_back({55.5, 12.25});
    save_labels(dir + "/l.txt", gt, 64, 4.0);
    int size = 0;
    double scale = 0;
    auto loaded = load_labels(dir + "/l.txt", size, scale);
    CHECK(size == 64);
    CHECK(scale == 4.0);
    REQUIRE(loaded.slots.size() == 2);
    CHECK(loaded.slots[0].p1.x == 20.125);
    CHECK(loaded.slots[0].p2.y == 31.25);
    CHECK(loaded.slots[0].angle_deg == 45);
    CHECK(loaded.slots[0].depth == 14.0625);
    REQUIRE(loaded.orphan_corners.size() == 1);
    CHECK(loaded.orphan_corners[0].x == 55.5);

    // arbitrary precision values survive the round trip exactly
    SceneGroundTruth gt2;
    Rng rng(6);
    gt2.slots.push_back({{rng.uniform(5, 20), rng.uniform(5, 20)},
                         {rng.uniform(25, 40), rng.uniform(25, 40)},
                         135,
                         rng.uniform(10, 20)});
    save_labels(dir + "/l2.txt", gt2, 64, 4.0);
    auto loaded2 = load_labels(dir + "/l2.txt", size, scale);
    CHECK(loaded2.slots[0].p1.x == gt2.slots[0].p1.x);
    CHECK(loaded2.slots[0].depth == gt2.slots[0].depth);
}

TEST_CASE("truncated or malformed label records raise parse errors with offsets") {
    const auto dir = temp_dir("labelsbad");
    {
        std::ofstream f(dir + "/t.txt");
        f << "size 64 64\nscale 4\nslot 1.0 2.0 3.0\n";  // truncated slot record
    }
    int size = 0;
    double scale = 0;
    try {
        load_labels(dir + "/t.txt", size, scale);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset == 19);  // start of the slot line
    }
    {
        std::ofstream f(dir + "/u.txt");
        f << "size 64 64\nscale 4\nwhatever 1 2\n";
    }
    CHECK_THROWS_AS(load_labels(dir + "/u.txt", size, scale), ParseError);
    {
        std::ofstream f(dir + "/v.txt");
        f << "scale 4\n";  // missing size
    }
    CHECK_THROWS_AS(load_labels(dir + "/v.txt", size, scale), ParseError);
    {
        std::ofstream f(dir + "/w.txt");
        f << "size 64 64\nscale 4\nslot 1 2 3 4 60 5\n";  // bad angle
    }
    CHECK_THROWS_AS(load_labels(dir + "/w.txt", size, scale), ParseError);
}

TEST_CASE("split follows the 9527:2138 proportions and is deterministic") {
    auto s1 = make_split(1000, 0, 0, 42);
    auto s2 = make_split(1000, 0, 0, 42);
    // round(1000 * 2138/11665) = 183 validation scenes
    CHECK(s1.val.size() == 183);
    CHECK(s1.train.size() == 817);
    CHECK(s1.train == s2.train);
    CHECK(s1.val == s2.val);
    auto s3 = make_split(1000, 0, 0, 43);
    CHECK(s1.train != s3.train);

    auto explicit_split = make_split(980, 800, 180, 1);
    CHECK(explicit_split.train.size() == 800);
    CHECK(explicit_split.val.size() == 180);
    CHECK_THROWS_AS(make_split(100, 90, 20, 1), ConfigError);
}

TEST_CASE("dataset round-trip: generate, load, identical content") {
    const auto dir = temp_dir("dataset");
    GeneratorKnobs knobs;
    knobs.size = 64;
    auto split = generate_dataset(dir, knobs, 12, 9, 3, 777);
    CHECK(split.train.size() == 9);
    CHECK(split.val.size() == 3);
    auto ds = load_dataset(dir);
    CHECK(ds.train.size() == 9);
    CHECK(ds.val.size() == 3);
    for (const auto& s : ds.train) {
        CHECK(s.size == 64);
        CHECK(s.image.size() == 64 * 64);
        for (double v : s.image) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    // regeneration with the same seed produces identical files
    const auto dir2 = temp_dir("dataset2");
    generate_dataset(dir2, knobs, 12, 9, 3, 777);
    for (const char* rel : {"/images/00000.pgm", "/labels/00005.txt", "/split.txt"}) {
        std::ifstream a(dir + rel, std::ios::binary), b(dir2 + rel, std::ios::binary);
        std::string ca((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string cb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(ca == cb);
    }
}

TEST_CASE("closure: oracle heatmaps + slot inference invert generation on clean scenes") {
    GeneratorKnobs knobs;
    knobs.size = 64;
    knobs.noise = 0.0;
    knobs.distractor_rate = 0.0;
    InferParams prm;
    prm.d_min = knobs.slot_min_width - 2;
    prm.d_max = knobs.slot_max_width + 2;

    int total_slots = 0;
    for (int i = 0; i < 40; ++i) {
        Rng rng(5000 + static_cast<std::uint64_t>(i) * 31);
        auto spec = sample_scene_spec(knobs, rng);
        auto scene = generate_scene(spec, rng.next_u64());
        auto maps = render_heatmap_targets(scene.gt, 64, 2.0, 1.0);
        auto slots = infer_slots(heatmap_from(maps.corners), heatmap_from(maps.entry_lines),
                                 heatmap_from(maps.separating_lines), prm);
        REQUIRE(slots.size() == scene.gt.slots.size());
        total_slots += static_cast<int>(slots.size());
        std::vector<char> used(scene.gt.slots.size(), 0);
        for (const auto& d : slots) {
            bool matched = false;
            for (std::size_t gi = 0; gi < scene.gt.slots.size(); ++gi) {
                if (used[gi]) continue;
                const auto& g = scene.gt.slots[gi];
                const double direct = std::max(std::hypot(d.p1.x - g.p1.x, d.p1.y - g.p1.y),
                                               std::hypot(d.p2.x - g.p2.x, d.p2.y - g.p2.y));
                const double swapped = std::max(std::hypot(d.p1.x - g.p2.x, d.p1.y - g.p2.y),
                                                std::hypot(d.p2.x - g.p1.x, d.p2.y - g.p1.y));
                if (std::min(direct, swapped) <= 1.5 && d.angle_deg == g.angle_deg) {
                    used[gi] = 1;
                    matched = true;
                    break;
                }
            }
            CHECK(matched);
        }
    }
    CHECK(total_slots > 40);  // the sampler actually produces multi-slot scenes
}
