#pragma once

// Orchestration: flat key=value experiment configuration, binary checkpoints
// (magic SPHG), the warm-up -> CEN pre-train -> per-layer selection ->
// prune -> fine-tune schedule, and validation metrics.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sphg/loss.hpp"
#include "sphg/network.hpp"
#include "sphg/prune.hpp"
#include "sphg/synth.hpp"

namespace sphg {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct BadVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct ShapeTableError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct TruncatedError : CheckpointError {
    using CheckpointError::CheckpointError;
};

// ---- configuration -----------------------------------------------------------

struct Config {
    std::uint64_t seed = 12345;
    int threads = 2;

    int network_input_size = 64;
    int network_depth = 3;
    int network_base_channels = 16;
    int network_stacks = 1;

    std::vector<int> select_dilations = {1, 2};
    int select_kernel_size = 3;
    int select_enlarge_threshold = 28;
    int select_cen_hidden = 16;

    double prune_layer_threshold = 0.01;
    int prune_global_count = 5;

    double loss_lambda_sl = 0.1;
    double loss_lambda_cen = 0.05;
    double loss_lambda_l1 = 0.05;
    double loss_positive_threshold = 0.95;

    double train_lr = 1e-3;
    int train_batch_size = 8;

    int schedule_warmup_epochs = 5;
    int schedule_cen_epochs = 10;
    int schedule_select_epochs_per_layer = 2;
    int schedule_prune_epochs = 30;
    int schedule_finetune_epochs = 15;
    int schedule_finetune_tier = 60;  // percent of baseline parameters; 100 = unpruned
    int schedule_epoch_checkpoints = 0;  // 1: keep a checkpoint per epoch (resume tests)

    std::string data_dir = "data";
    int data_scene_count = 1000;
    int data_train_count = 0;  // 0,0 -> 9527:2138 proportions
    int data_val_count = 0;
    double data_slot_min_width = 12.0;
    double data_slot_max_width = 22.0;
    int data_max_slots = 3;
    double data_noise = 0.02;
    double data_distractor_rate = 0.5;
    double data_orphan_rate = 0.15;
    double data_cm_per_px = 4.0;
    double data_line_width = 1.8;

    double target_corner_sigma = 2.0;
    double target_line_sigma = 1.0;

    double eval_delta_px = 1.5;

    double infer_peak_threshold = 0.3;
    double infer_line_threshold = 0.25;
    double infer_nms_radius = 5.0;
    double infer_corridor_width = 4.0;
    double infer_d_min = 0.0;  // 0 -> slot_min_width - 2
    double infer_d_max = 0.0;  // 0 -> slot_max_width + 2
    double infer_probe_factor = 1.5;

    static Config desk_preset();
    static Config paper_preset();
    static Config from_file(const std::string& path);

    void set(const std::string& key, const std::string& value);  // unknown key -> ConfigError
    std::string dump() const;                                    // canonical key = value lines

    NetworkConfig network_config() const;
    LossWeights loss_weights() const;
    GeneratorKnobs generator_knobs() const;
    InferParams infer_params() const;
};

// ---- trainer state & checkpoints ----------------------------------------------

struct StageCursor {
    Stage stage = Stage::Warmup;
    int epoch_in_stage = 0;  // completed epochs within the stage
    int select_phase = 0;    // layers committed so far
    int global_epoch = 0;    // completed epochs overall (log numbering)
};

struct TrainerState {
    NetworkGraph net;
    AdamState adam;
    Rng train_rng;
    StageCursor cursor;
    std::int64_t baseline_params = 0;   // post-selection, pre-prune parameter count
    double baseline_precision = 0.0;    // best val precision seen before pruning
    double best_precision = -1.0;       // best val precision during fine-tune
};

std::vector<std::uint8_t> serialize_checkpoint(const TrainerState& state);
TrainerState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const TrainerState& state);
TrainerState load_checkpoint(const std::string& path);

// ---- evaluation ----------------------------------------------------------------

struct EvalResult {
    double precision = 0.0;
    double recall = 0.0;
    LocStats loc_px, loc_cm;
    std::int64_t params = 0;
    int images = 0;
    int tp = 0, fp = 0, fn = 0;
};

EvalResult evaluate(const NetworkGraph& net, const std::vector<Sample>& samples,
                    const Config& cfg);

struct CurvePoint {
    double threshold = 0.0;
    double miss_rate = 0.0;
    double fppi = 0.0;
};
std::vector<CurvePoint> miss_rate_curve(const NetworkGraph& net,
                                        const std::vector<Sample>& samples, const Config& cfg);
// Linear interpolation in FPPI; clamps to curve ends.
double miss_rate_at_fppi(const std::vector<CurvePoint>& curve, double fppi);

// ---- pipeline -------------------------------------------------------------------

struct PipelineResult {
    EvalResult final_eval;            // evaluation of the best fine-tune checkpoint
    double baseline_precision = 0.0;  // best pre-prune val precision
    std::int64_t baseline_params = 0;
    std::string best_checkpoint, final_checkpoint;
    std::map<int, std::string> tier_checkpoints;  // percent -> path
    std::string metrics_log, prune_log, selection_report;
};

// Runs stages from the cursor (scratch or resume) through `until`.
PipelineResult run_pipeline(const Config& cfg, const std::string& out_dir,
                            const std::string& resume_path = "",
                            Stage until = Stage::Finetune);

}  // namespace sphg
