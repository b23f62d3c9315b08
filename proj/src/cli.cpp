#include "sphg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "sphg/pipeline.hpp"
#include "sphg/slots.hpp"
#include "sphg/threading.hpp"

namespace sphg {

namespace {

namespace fs = std::filesystem;

Config build_config(const std::string& preset, const std::string& config_path,
                    const std::vector<std::string>& overrides, std::uint64_t seed_override,
                    bool has_seed) {
    Config cfg;
    if (preset == "paper") {
        cfg = Config::paper_preset();
    } else if (preset == "desk" || preset.empty()) {
        cfg = Config::desk_preset();
    } else {
        throw ConfigError("unknown preset: " + preset);
    }
    if (!config_path.empty()) cfg = Config::from_file(config_path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
        std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        auto trim = [](std::string& s) {
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.erase(s.begin());
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
        };
        trim(k);
        trim(v);
        cfg.set(k, v);
    }
    if (has_seed) cfg.seed = seed_override;
    return cfg;
}

void write_manifest(const std::string& dir) {
    if (!fs::exists(dir)) return;
    std::vector<std::pair<std::string, std::uint64_t>> entries;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).string();
        if (rel == "manifest.txt") continue;
        std::ifstream f(e.path(), std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        entries.emplace_back(rel, fnv1a(content.data(), content.size()));
    }
    std::sort(entries.begin(), entries.end());
    std::ofstream m(dir + "/manifest.txt");
    for (const auto& [rel, hash] : entries) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
        m << buf << "  " << rel << "\n";
    }
}

// plots are rectangular; save_pgm is square-only
void save_pgm_rect(const std::string& path, const std::vector<double>& img, int w, int h) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void plot_to_pgm(const std::string& path, const std::vector<std::pair<double, double>>& pts) {
    const int W = 320, H = 240, M = 24;
    std::vector<double> img(static_cast<std::size_t>(W) * H, 1.0);
    auto put = [&](int x, int y) {
        if (x >= 0 && y >= 0 && x < W && y < H) img[static_cast<std::size_t>(y) * W + x] = 0.0;
    };
    for (int x = M; x < W - M; ++x) put(x, H - M);
    for (int y = M; y < H - M; ++y) put(M, y);
    if (!pts.empty()) {
        double x0 = pts[0].first, x1 = pts[0].first, y0 = pts[0].second, y1 = pts[0].second;
        for (const auto& [x, y] : pts) {
            x0 = std::min(x0, x); x1 = std::max(x1, x);
            y0 = std::min(y0, y); y1 = std::max(y1, y);
        }
        if (x1 - x0 < 1e-12) x1 = x0 + 1;
        if (y1 - y0 < 1e-12) y1 = y0 + 1;
        auto map = [&](double x, double y) {
            const int px = M + static_cast<int>((x - x0) / (x1 - x0) * (W - 2 * M));
            const int py = H - M - static_cast<int>((y - y0) / (y1 - y0) * (H - 2 * M));
            return std::pair<int, int>(px, py);
        };
        for (std::size_t i = 1; i < pts.size(); ++i) {
            auto [ax, ay] = map(pts[i - 1].first, pts[i - 1].second);
            auto [bx, by] = map(pts[i].first, pts[i].second);
            const int steps = std::max(std::abs(bx - ax), std::abs(by - ay)) + 1;
            for (int s = 0; s <= steps; ++s) {
                const double t = static_cast<double>(s) / steps;
                put(static_cast<int>(std::lround(ax + (bx - ax) * t)),
                    static_cast<int>(std::lround(ay + (by - ay) * t)));
            }
        }
    }
    save_pgm_rect(path, img, W, H);
}

void save_ppm(const std::string& path, const std::vector<double>& rgb, int w, int h) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void draw_overlay_segment(std::vector<double>& rgb, int size, Point a, Point b, int channel) {
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const int steps = static_cast<int>(len * 2) + 1;
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const int x = static_cast<int>(std::lround(a.x + (b.x - a.x) * t));
        const int y = static_cast<int>(std::lround(a.y + (b.y - a.y) * t));
        if (x < 0 || y < 0 || x >= size || y >= size) continue;
        double* px = &rgb[(static_cast<std::size_t>(y) * size + x) * 3];
        px[0] = px[1] = px[2] = 0.0;
        px[static_cast<std::size_t>(channel)] = 1.0;
    }
}

int cmd_gen_data(const Config& cfg, const std::string& out_override) {
    Config c = cfg;
    if (!out_override.empty()) c.data_dir = out_override;
    const auto split = generate_dataset(c.data_dir, c.generator_knobs(), c.data_scene_count,
                                        c.data_train_count, c.data_val_count, c.seed);
    std::printf("gen-data: %d scenes (%zu train / %zu val) in %s\n", c.data_scene_count,
                split.train.size(), split.val.size(), c.data_dir.c_str());
    write_manifest(c.data_dir);
    return 0;
}

int cmd_stage(const Config& cfg, const std::string& out_dir, const std::string& resume,
              Stage until) {
    const auto res = run_pipeline(cfg, out_dir, resume, until);
    std::printf("pipeline through %s complete: precision %.4f recall %.4f params %lld\n",
                stage_name(until), res.final_eval.precision, res.final_eval.recall,
                static_cast<long long>(res.final_eval.params));
    write_manifest(out_dir);
    return 0;
}

int cmd_eval(const Config& cfg, const std::string& checkpoint, const std::string& out_dir,
             bool oracle, bool curve) {
    fs::create_directories(out_dir);
    set_threads(cfg.threads);
    LoadedDataset ds = load_dataset(cfg.data_dir);
    const auto prm = cfg.infer_params();

    if (oracle) {
        // closure mode: slot inference on oracle target heatmaps
        int tp = 0, fp = 0, fn = 0;
        int slot_found = 0, slot_total = 0, slot_false = 0;
        std::vector<double> errors;
        for (const auto& s : ds.val) {
            const auto targets = render_heatmap_targets(s.gt, s.size, cfg.target_corner_sigma,
                                                        cfg.target_line_sigma);
            const auto cm = heatmap_from(targets.corners);
            const auto peaks = find_peaks(cm, prm.peak_threshold, prm.nms_radius);
            std::vector<Point> det;
            for (const auto& p : peaks) det.push_back({p.x, p.y});
            const auto m = match_points(s.gt.all_corners(), det, cfg.eval_delta_px);
            tp += m.tp; fp += m.fp; fn += m.fn;
            errors.insert(errors.end(), m.errors_px.begin(), m.errors_px.end());

            const auto slots = infer_slots(cm, heatmap_from(targets.entry_lines),
                                           heatmap_from(targets.separating_lines), prm);
            slot_total += static_cast<int>(s.gt.slots.size());
            std::vector<char> used(s.gt.slots.size(), 0);
            for (const auto& d : slots) {
                bool matched = false;
                for (std::size_t gi = 0; gi < s.gt.slots.size(); ++gi) {
                    if (used[gi]) continue;
                    const auto& g = s.gt.slots[gi];
                    const double direct = std::max(std::hypot(d.p1.x - g.p1.x, d.p1.y - g.p1.y),
                                                   std::hypot(d.p2.x - g.p2.x, d.p2.y - g.p2.y));
                    const double swapped = std::max(std::hypot(d.p1.x - g.p2.x, d.p1.y - g.p2.y),
                                                    std::hypot(d.p2.x - g.p1.x, d.p2.y - g.p1.y));
                    if (std::min(direct, swapped) <= cfg.eval_delta_px && d.angle_deg == g.angle_deg) {
                        used[gi] = 1;
                        matched = true;
                        break;
                    }
                }
                if (matched) ++slot_found; else ++slot_false;
            }
        }
        MatchResult agg;
        agg.tp = tp; agg.fp = fp; agg.fn = fn; agg.errors_px = errors;
        const auto loc = localization_error_px(agg);
        std::printf("oracle eval: precision %.6f recall %.6f loc_mean_px %.4f loc_std_px %.4f\n",
                    precision(agg), recall(agg), loc.defined ? loc.mean : -1.0,
                    loc.defined ? loc.stddev : -1.0);
        std::printf("oracle slots: recovered %d/%d false_positives %d\n", slot_found, slot_total,
                    slot_false);
        write_manifest(out_dir);
        return 0;
    }

    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint (or --oracle)");
    auto state = load_checkpoint(checkpoint);
    const auto ev = evaluate(state.net, ds.val, cfg);
    const auto loc_cm = ev.loc_cm;

    // per-image latency: median of 50 single-image forward+postprocess passes,
    // single-threaded
    double latency_ms = 0.0;
    if (!ds.val.empty()) {
        const int prev = threads();
        set_threads(1);
        GradGuard no_grad(false);
        const auto& s = ds.val[0];
        std::vector<double> times;
        for (int i = 0; i < 50; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            auto img = Tensor::from_data({1, 1, s.size, s.size}, s.image);
            auto fr = forward(state.net, img, false);
            const auto slots = infer_slots(heatmap_from(fr.stacks.back().corners),
                                           heatmap_from(fr.stacks.back().entry_lines),
                                           heatmap_from(fr.stacks.back().separating_lines), prm);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        latency_ms = times[times.size() / 2];
        set_threads(prev);
    }

    std::printf("eval: precision %.6f recall %.6f loc_mean %.4f px (%.4f cm) loc_std %.4f px "
                "(%.4f cm) params %lld latency_ms %.2f\n",
                ev.precision, ev.recall, ev.loc_px.defined ? ev.loc_px.mean : -1.0,
                loc_cm.defined ? loc_cm.mean : -1.0, ev.loc_px.defined ? ev.loc_px.stddev : -1.0,
                loc_cm.defined ? loc_cm.stddev : -1.0, static_cast<long long>(ev.params),
                latency_ms);

    if (curve) {
        fs::create_directories(out_dir + "/curves");
        const auto pts = miss_rate_curve(state.net, ds.val, cfg);
        std::ofstream f(out_dir + "/curves/fig5_missrate_fppi.txt");
        for (const auto& p : pts) {
            char line[96];
            std::snprintf(line, sizeof line, "%.2f %.6f %.6f\n", p.threshold, p.miss_rate, p.fppi);
            f << line;
        }
    }
    write_manifest(out_dir);
    return 0;
}

int cmd_infer(const Config& cfg, const std::string& checkpoint,
              const std::vector<std::string>& images, const std::string& out_dir, bool overlay) {
    if (checkpoint.empty()) throw ConfigError("infer needs --checkpoint");
    if (images.empty()) throw ConfigError("infer needs at least one --image");
    fs::create_directories(out_dir);
    set_threads(cfg.threads);
    auto state = load_checkpoint(checkpoint);
    const auto prm = cfg.infer_params();
    GradGuard no_grad(false);

    std::ofstream records(out_dir + "/slots.txt");
    for (const auto& path : images) {
        int size = 0;
        auto img_data = load_pgm(path, size);
        if (size != state.net.config.input_size) {
            throw ConfigError("image size does not match the network input size");
        }
        auto img = Tensor::from_data({1, 1, size, size}, img_data);
        auto fr = forward(state.net, img, false);
        const auto corner_map = heatmap_from(fr.stacks.back().corners);
        const auto entry_map = heatmap_from(fr.stacks.back().entry_lines);
        const auto sep_map = heatmap_from(fr.stacks.back().separating_lines);
        const auto slots = infer_slots(corner_map, entry_map, sep_map, prm);

        const std::string name = fs::path(path).filename().string();
        const double scale = cfg.data_cm_per_px;
        for (const auto& s : slots) {
            char line[384];
            std::snprintf(line, sizeof line,
                          "image %s slot px %.3f %.3f %.3f %.3f cm %.3f %.3f %.3f %.3f angle %d "
                          "side %d entry_score %.4f sep_score %.4f conf %.4f\n",
                          name.c_str(), s.p1.x, s.p1.y, s.p2.x, s.p2.y, s.p1.x * scale,
                          s.p1.y * scale, s.p2.x * scale, s.p2.y * scale, s.angle_deg, s.side,
                          s.entry_score, s.sep_score, s.confidence);
            records << line;
        }
        if (slots.empty()) records << "image " << name << " none\n";

        if (overlay) {
            std::vector<double> rgb(static_cast<std::size_t>(size) * size * 3);
            for (int i = 0; i < size * size; ++i) {
                rgb[static_cast<std::size_t>(i) * 3 + 0] = img_data[static_cast<std::size_t>(i)];
                rgb[static_cast<std::size_t>(i) * 3 + 1] = img_data[static_cast<std::size_t>(i)];
                rgb[static_cast<std::size_t>(i) * 3 + 2] = img_data[static_cast<std::size_t>(i)];
            }
            for (const auto& s : slots) {
                // entry green, separating red, corners blue
                draw_overlay_segment(rgb, size, s.p1, s.p2, 1);
                const double w = std::hypot(s.p2.x - s.p1.x, s.p2.y - s.p1.y);
                const Point d{(s.p2.x - s.p1.x) / w, (s.p2.y - s.p1.y) / w};
                const Point sd = separating_direction(d, s.angle_deg, s.side);
                const double probe = prm.probe_factor * w;
                draw_overlay_segment(rgb, size, s.p1,
                                     {s.p1.x + sd.x * probe, s.p1.y + sd.y * probe}, 0);
                draw_overlay_segment(rgb, size, s.p2,
                                     {s.p2.x + sd.x * probe, s.p2.y + sd.y * probe}, 0);
                for (const auto& c : {s.p1, s.p2}) {
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int x = static_cast<int>(std::lround(c.x)) + dx;
                            const int y = static_cast<int>(std::lround(c.y)) + dy;
                            if (x < 0 || y < 0 || x >= size || y >= size) continue;
                            double* px = &rgb[(static_cast<std::size_t>(y) * size + x) * 3];
                            px[0] = 0.0; px[1] = 0.0; px[2] = 1.0;
                        }
                    }
                }
            }
            save_ppm(out_dir + "/" + fs::path(path).stem().string() + "_overlay.ppm", rgb, size,
                     size);
        }
    }
    records.close();
    write_manifest(out_dir);
    return 0;
}

int cmd_export_plots(const std::string& run_dir, const std::string& out_dir) {
    fs::create_directories(out_dir + "/plots");
    struct PlotSpec {
        const char* file;
        int xcol, ycol;
        const char* out;
    };
    // fig5: miss rate vs FPPI; fig6: precision vs fraction removed; fig7: precision vs epoch
    const PlotSpec specs[] = {
        {"curves/fig5_missrate_fppi.txt", 2, 1, "plots/fig5_missrate_fppi.pgm"},
        {"curves/fig6_prune.txt", 2, 3, "plots/fig6_prune.pgm"},
        {"curves/fig7_finetune.txt", 0, 1, "plots/fig7_finetune.pgm"},
    };
    int made = 0;
    for (const auto& sp : specs) {
        const std::string src = run_dir + "/" + sp.file;
        if (!fs::exists(src)) continue;
        std::ifstream f(src);
        std::vector<std::pair<double, double>> pts;
        std::string line;
        while (std::getline(f, line)) {
            std::istringstream iss(line);
            std::vector<double> cols;
            double v;
            while (iss >> v) cols.push_back(v);
            if (static_cast<int>(cols.size()) > std::max(sp.xcol, sp.ycol)) {
                pts.emplace_back(cols[static_cast<std::size_t>(sp.xcol)],
                                 cols[static_cast<std::size_t>(sp.ycol)]);
            }
        }
        if (pts.empty()) continue;
        std::sort(pts.begin(), pts.end());
        plot_to_pgm(out_dir + "/" + sp.out, pts);
        fs::copy_file(src, out_dir + "/plots/" + fs::path(sp.file).filename().string(),
                      fs::copy_options::overwrite_existing);
        ++made;
    }
    std::printf("export-plots: %d plots written to %s/plots\n", made, out_dir.c_str());
    write_manifest(out_dir);
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"select-and-prune hourglass parking-slot detector"};
    app.require_subcommand(1);

    std::string preset, config_path, out_dir = "run", resume, checkpoint, run_dir, seed_str;
    std::vector<std::string> overrides, images;
    bool oracle = false, curve = false, overlay = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "config file (key = value lines)");
        sub->add_option("--preset", preset, "desk (default) or paper");
        sub->add_option("--set", overrides, "override: key=value")->take_all();
        sub->add_option("--seed", seed_str, "override config seed");
        sub->add_option("--out", out_dir, "output directory");
    };

    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset");
    add_common(gen);
    auto* train = app.add_subcommand("train", "run warm-up + CEN pre-training");
    add_common(train);
    train->add_option("--resume", resume, "checkpoint to resume from");
    auto* select = app.add_subcommand("select", "run stages through kernel selection");
    add_common(select);
    select->add_option("--resume", resume, "checkpoint to resume from");
    auto* prune = app.add_subcommand("prune", "run stages through channel pruning");
    add_common(prune);
    prune->add_option("--resume", resume, "checkpoint to resume from");
    auto* finetune = app.add_subcommand("finetune", "run the full schedule through fine-tuning");
    add_common(finetune);
    finetune->add_option("--resume", resume, "checkpoint to resume from");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
    eval->add_flag("--oracle", oracle, "evaluate slot inference on oracle target heatmaps");
    eval->add_flag("--curve", curve, "write the miss-rate vs FPPI curve");
    auto* infer = app.add_subcommand("infer", "detect slots on images");
    add_common(infer);
    infer->add_option("--checkpoint", checkpoint, "checkpoint to run");
    infer->add_option("--image", images, "input PGM image(s)")->take_all();
    infer->add_flag("--overlay", overlay, "write detection overlay images");
    auto* plots = app.add_subcommand("export-plots", "render curve data to plot images");
    plots->add_option("--run", run_dir, "run directory with curves/")->required();
    plots->add_option("--out", out_dir, "output directory");

    std::vector<const char*> argv;
    argv.push_back("sphg");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const bool has_seed = !seed_str.empty();
        std::uint64_t seed = 0;
        if (has_seed) seed = std::stoull(seed_str);
        if (gen->parsed()) {
            Config cfg = build_config(preset, config_path, overrides, seed, has_seed);
            return cmd_gen_data(cfg, out_dir == "run" ? "" : out_dir);
        }
        Config cfg = build_config(preset, config_path, overrides, seed, has_seed);
        if (train->parsed()) return cmd_stage(cfg, out_dir, resume, Stage::CenPretrain);
        if (select->parsed()) return cmd_stage(cfg, out_dir, resume, Stage::Select);
        if (prune->parsed()) return cmd_stage(cfg, out_dir, resume, Stage::Prune);
        if (finetune->parsed()) return cmd_stage(cfg, out_dir, resume, Stage::Finetune);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, out_dir, oracle, curve);
        if (infer->parsed()) return cmd_infer(cfg, checkpoint, images, out_dir, overlay);
        if (plots->parsed()) return cmd_export_plots(run_dir, out_dir);
        std::fprintf(stderr, "no command\n");
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 1;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 1;
    } catch (const MissingInputError& e) {
        std::fprintf(stderr, "missing input: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "invariant breach: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 4;
    }
}

}  // namespace sphg
