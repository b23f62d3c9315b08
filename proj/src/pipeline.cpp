#include "sphg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sphg/slots.hpp"
#include "sphg/threading.hpp"

namespace sphg {

// ---- configuration -----------------------------------------------------------

namespace {

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + key + ": '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(parse_int(key, item));
    }
    if (out.empty()) throw ConfigError("empty list for " + key);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::desk_preset() { return Config{}; }

Config Config::paper_preset() {
    Config c;
    c.network_input_size = 224;
    c.network_depth = 4;
    c.network_base_channels = 64;
    c.schedule_prune_epochs = 100;
    c.data_scene_count = 11665;
    c.data_slot_min_width = 40.0;
    c.data_slot_max_width = 78.0;
    c.data_max_slots = 4;
    return c;
}

void Config::set(const std::string& key, const std::string& value) {
    if (key == "seed") seed = parse_u64(key, value);
    else if (key == "threads") threads = parse_int(key, value);
    else if (key == "network.input_size") network_input_size = parse_int(key, value);
    else if (key == "network.depth") network_depth = parse_int(key, value);
    else if (key == "network.base_channels") network_base_channels = parse_int(key, value);
    else if (key == "network.stacks") network_stacks = parse_int(key, value);
    else if (key == "select.dilations") select_dilations = parse_int_list(key, value);
    else if (key == "select.kernel_size") select_kernel_size = parse_int(key, value);
    else if (key == "select.enlarge_threshold") select_enlarge_threshold = parse_int(key, value);
    else if (key == "select.cen_hidden") select_cen_hidden = parse_int(key, value);
    else if (key == "prune.layer_threshold") prune_layer_threshold = parse_double(key, value);
    else if (key == "prune.global_count") prune_global_count = parse_int(key, value);
    else if (key == "loss.lambda_sl") loss_lambda_sl = parse_double(key, value);
    else if (key == "loss.lambda_cen") loss_lambda_cen = parse_double(key, value);
    else if (key == "loss.lambda_l1") loss_lambda_l1 = parse_double(key, value);
    else if (key == "loss.positive_threshold") loss_positive_threshold = parse_double(key, value);
    else if (key == "train.lr") train_lr = parse_double(key, value);
    else if (key == "train.batch_size") train_batch_size = parse_int(key, value);
    else if (key == "schedule.warmup_epochs") schedule_warmup_epochs = parse_int(key, value);
    else if (key == "schedule.cen_epochs") schedule_cen_epochs = parse_int(key, value);
    else if (key == "schedule.select_epochs_per_layer") schedule_select_epochs_per_layer = parse_int(key, value);
    else if (key == "schedule.prune_epochs") schedule_prune_epochs = parse_int(key, value);
    else if (key == "schedule.finetune_epochs") schedule_finetune_epochs = parse_int(key, value);
    else if (key == "schedule.finetune_tier") schedule_finetune_tier = parse_int(key, value);
    else if (key == "data.dir") data_dir = value;
    else if (key == "data.scene_count") data_scene_count = parse_int(key, value);
    else if (key == "data.train_count") data_train_count = parse_int(key, value);
    else if (key == "data.val_count") data_val_count = parse_int(key, value);
    else if (key == "data.slot_min_width") data_slot_min_width = parse_double(key, value);
    else if (key == "data.slot_max_width") data_slot_max_width = parse_double(key, value);
    else if (key == "data.max_slots") data_max_slots = parse_int(key, value);
    else if (key == "data.noise") data_noise = parse_double(key, value);
    else if (key == "data.distractor_rate") data_distractor_rate = parse_double(key, value);
    else if (key == "data.orphan_rate") data_orphan_rate = parse_double(key, value);
    else if (key == "data.cm_per_px") data_cm_per_px = parse_double(key, value);
    else if (key == "data.line_width") data_line_width = parse_double(key, value);
    else if (key == "target.corner_sigma") target_corner_sigma = parse_double(key, value);
    else if (key == "target.line_sigma") target_line_sigma = parse_double(key, value);
    else if (key == "eval.delta_px") eval_delta_px = parse_double(key, value);
    else if (key == "infer.peak_threshold") infer_peak_threshold = parse_double(key, value);
    else if (key == "infer.line_threshold") infer_line_threshold = parse_double(key, value);
    else if (key == "infer.nms_radius") infer_nms_radius = parse_double(key, value);
    else if (key == "infer.corridor_width") infer_corridor_width = parse_double(key, value);
    else if (key == "infer.d_min") infer_d_min = parse_double(key, value);
    else if (key == "infer.d_max") infer_d_max = parse_double(key, value);
    else if (key == "infer.probe_factor") infer_probe_factor = parse_double(key, value);
    else throw ConfigError("unknown config key: " + key);
}

std::string Config::dump() const {
    std::ostringstream o;
    o << "seed = " << seed << "\n";
    o << "threads = " << threads << "\n";
    o << "network.input_size = " << network_input_size << "\n";
    o << "network.depth = " << network_depth << "\n";
    o << "network.base_channels = " << network_base_channels << "\n";
    o << "network.stacks = " << network_stacks << "\n";
    o << "select.dilations = ";
    for (std::size_t i = 0; i < select_dilations.size(); ++i) {
        o << (i ? "," : "") << select_dilations[i];
    }
    o << "\n";
    o << "select.kernel_size = " << select_kernel_size << "\n";
    o << "select.enlarge_threshold = " << select_enlarge_threshold << "\n";
    o << "select.cen_hidden = " << select_cen_hidden << "\n";
    o << "prune.layer_threshold = " << prune_layer_threshold << "\n";
    o << "prune.global_count = " << prune_global_count << "\n";
    o << "loss.lambda_sl = " << loss_lambda_sl << "\n";
    o << "loss.lambda_cen = " << loss_lambda_cen << "\n";
    o << "loss.lambda_l1 = " << loss_lambda_l1 << "\n";
    o << "loss.positive_threshold = " << loss_positive_threshold << "\n";
    o << "train.lr = " << train_lr << "\n";
    o << "train.batch_size = " << train_batch_size << "\n";
    o << "schedule.warmup_epochs = " << schedule_warmup_epochs << "\n";
    o << "schedule.cen_epochs = " << schedule_cen_epochs << "\n";
    o << "schedule.select_epochs_per_layer = " << schedule_select_epochs_per_layer << "\n";
    o << "schedule.prune_epochs = " << schedule_prune_epochs << "\n";
    o << "schedule.finetune_epochs = " << schedule_finetune_epochs << "\n";
    o << "schedule.finetune_tier = " << schedule_finetune_tier << "\n";
    o << "data.dir = " << data_dir << "\n";
    o << "data.scene_count = " << data_scene_count << "\n";
    o << "data.train_count = " << data_train_count << "\n";
    o << "data.val_count = " << data_val_count << "\n";
    o << "data.slot_min_width = " << data_slot_min_width << "\n";
    o << "data.slot_max_width = " << data_slot_max_width << "\n";
    o << "data.max_slots = " << data_max_slots << "\n";
    o << "data.noise = " << data_noise << "\n";
    o << "data.distractor_rate = " << data_distractor_rate << "\n";
    o << "data.orphan_rate = " << data_orphan_rate << "\n";
    o << "data.cm_per_px = " << data_cm_per_px << "\n";
    o << "data.line_width = " << data_line_width << "\n";
    o << "target.corner_sigma = " << target_corner_sigma << "\n";
    o << "target.line_sigma = " << target_line_sigma << "\n";
    o << "eval.delta_px = " << eval_delta_px << "\n";
    o << "infer.peak_threshold = " << infer_peak_threshold << "\n";
    o << "infer.line_threshold = " << infer_line_threshold << "\n";
    o << "infer.nms_radius = " << infer_nms_radius << "\n";
    o << "infer.corridor_width = " << infer_corridor_width << "\n";
    o << "infer.d_min = " << infer_d_min << "\n";
    o << "infer.d_max = " << infer_d_max << "\n";
    o << "infer.probe_factor = " << infer_probe_factor << "\n";
    return o.str();
}

Config Config::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingInputError("cannot open config: " + path);
    Config c;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + " is not key = value");
        }
        c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
}

NetworkConfig Config::network_config() const {
    NetworkConfig n;
    n.input_size = network_input_size;
    n.depth = network_depth;
    n.base_channels = network_base_channels;
    n.stack_count = network_stacks;
    n.candidate_dilations = select_dilations;
    n.kernel_size = select_kernel_size;
    n.enlarge_threshold = select_enlarge_threshold;
    n.cen_hidden = select_cen_hidden;
    return n;
}

LossWeights Config::loss_weights() const {
    LossWeights w;
    w.lambda_sl = loss_lambda_sl;
    w.lambda_cen = loss_lambda_cen;
    w.lambda_l1 = loss_lambda_l1;
    w.positive_threshold = loss_positive_threshold;
    return w;
}

GeneratorKnobs Config::generator_knobs() const {
    GeneratorKnobs k;
    k.size = network_input_size;
    k.slot_min_width = data_slot_min_width;
    k.slot_max_width = data_slot_max_width;
    k.max_slots = data_max_slots;
    k.line_width = data_line_width;
    k.noise = data_noise;
    k.distractor_rate = data_distractor_rate;
    k.orphan_rate = data_orphan_rate;
    k.cm_per_px = data_cm_per_px;
    return k;
}

InferParams Config::infer_params() const {
    InferParams p;
    p.peak_threshold = infer_peak_threshold;
    p.line_threshold = infer_line_threshold;
    p.nms_radius = infer_nms_radius;
    p.corridor_width = infer_corridor_width;
    p.d_min = infer_d_min > 0 ? infer_d_min : data_slot_min_width - 2.0;
    p.d_max = infer_d_max > 0 ? infer_d_max : data_slot_max_width + 2.0;
    p.probe_factor = infer_probe_factor;
    return p;
}

// ---- checkpoint codec ----------------------------------------------------------

namespace {

struct Writer {
    std::vector<std::uint8_t> out;
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void i32(std::int32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void f32blob(const std::vector<double>& d) {
        for (double v : d) {
            const float f = static_cast<float>(v);
            bytes(&f, 4);
        }
    }
    void f64blob(const std::vector<double>& d) {
        for (double v : d) f64(v);
    }
};

struct Reader {
    const std::uint8_t* p;
    std::size_t n, pos = 0;
    void need(std::size_t k) {
        if (pos + k > n) throw TruncatedError("checkpoint truncated at byte " + std::to_string(pos));
    }
    void bytes(void* dst, std::size_t k) {
        need(k);
        std::memcpy(dst, p + pos, k);
        pos += k;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::int32_t i32() { std::int32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    std::vector<double> f32blob(std::size_t count) {
        std::vector<double> out(count);
        for (auto& v : out) {
            float f;
            bytes(&f, 4);
            v = static_cast<double>(f);
        }
        return out;
    }
    std::vector<double> f64blob(std::size_t count) {
        std::vector<double> out(count);
        for (auto& v : out) v = f64();
    return out;
    }
};

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TrainerState& state) {
    const auto& net = state.net;
    Writer w;
    w.bytes("SPHG", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(net.config.input_size));
    w.u32(static_cast<std::uint32_t>(net.config.depth));
    w.u32(static_cast<std::uint32_t>(net.config.base_channels));
    w.u32(static_cast<std::uint32_t>(net.config.stack_count));
    w.u32(static_cast<std::uint32_t>(net.config.kernel_size));
    w.u32(static_cast<std::uint32_t>(net.config.enlarge_threshold));
    w.u32(static_cast<std::uint32_t>(net.config.cen_hidden));
    w.f64(net.config.head_bias_init);
    w.u32(static_cast<std::uint32_t>(net.config.candidate_dilations.size()));
    for (int d : net.config.candidate_dilations) w.i32(d);

    w.u32(static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        w.u8(static_cast<std::uint8_t>(layer.kind));
        w.i32(layer.input_id);
        w.i32(layer.skip_input_id);
        w.u32(static_cast<std::uint32_t>(layer.concat_inputs.size()));
        for (int id : layer.concat_inputs) w.i32(id);
        w.u32(static_cast<std::uint32_t>(layer.c_in));
        w.u32(static_cast<std::uint32_t>(layer.c_out));
        w.u32(static_cast<std::uint32_t>(layer.feature_size));
        w.u8(layer.prunable ? 1 : 0);
        if (layer.kind == LayerKind::ConvBlock) {
            const auto& s = *layer.select;
            w.u8(s.is_committed() ? 1 : 0);
            w.i32(s.committed);
            w.u32(static_cast<std::uint32_t>(s.candidate_specs.size()));
            for (const auto& c : s.candidate_specs) {
                w.u32(static_cast<std::uint32_t>(c.k));
                w.u32(static_cast<std::uint32_t>(c.dilation));
            }
            w.u32(static_cast<std::uint32_t>(s.candidates.size()));
            for (const auto& c : s.candidates) {
                w.u32(static_cast<std::uint32_t>(c.weights->dim(2)));
                w.u32(static_cast<std::uint32_t>(c.dilation));
            }
        }
    }

    w.u8(static_cast<std::uint8_t>(state.cursor.stage));
    w.u32(static_cast<std::uint32_t>(state.cursor.epoch_in_stage));
    w.u32(static_cast<std::uint32_t>(state.cursor.select_phase));
    w.u32(static_cast<std::uint32_t>(state.cursor.global_epoch));
    w.u64(static_cast<std::uint64_t>(state.adam.step));
    w.f64(state.best_precision);
    w.f64(state.baseline_precision);
    w.u64(static_cast<std::uint64_t>(state.baseline_params));
    for (int i = 0; i < 4; ++i) w.u64(state.train_rng.state()[i]);

    for (const auto& layer : net.layers) {
        if (layer.kind == LayerKind::ConvBlock) {
            const auto& s = *layer.select;
            for (const auto& c : s.candidates) {
                w.f32blob(c.weights->data);
                w.f32blob(c.bias->data);
            }
            if (!s.is_committed()) {
                w.f32blob(s.cen_w1->data);
                w.f32blob(s.cen_b1->data);
                w.f32blob(s.cen_w2->data);
                w.f32blob(s.cen_b2->data);
                w.u32(static_cast<std::uint32_t>(s.alpha_history.size()));
                for (const auto& h : s.alpha_history) w.f64blob(h);
                w.f64blob(s.alpha_accum);
                w.u64(static_cast<std::uint64_t>(s.alpha_batches));
            }
        } else if (layer.kind == LayerKind::Head || layer.kind == LayerKind::Remap) {
            w.f32blob(layer.conv_w->data);
            w.f32blob(layer.conv_b->data);
        }
    }

    // optimizer moments in parameter order
    auto params = net.parameters();
    TrainerState& mut = const_cast<TrainerState&>(state);
    for (const auto& p : params) {
        auto& mom = mut.adam.moments_for(*p);
        w.f32blob(mom.m);
        w.f32blob(mom.v);
    }
    return std::move(w.out);
}

TrainerState deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes.data(), bytes.size()};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "SPHG", 4) != 0) throw BadMagicError("bad checkpoint magic");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
    }

    TrainerState st;
    NetworkGraph& net = st.net;
    net.config.input_size = static_cast<int>(r.u32());
    net.config.depth = static_cast<int>(r.u32());
    net.config.base_channels = static_cast<int>(r.u32());
    net.config.stack_count = static_cast<int>(r.u32());
    net.config.kernel_size = static_cast<int>(r.u32());
    net.config.enlarge_threshold = static_cast<int>(r.u32());
    net.config.cen_hidden = static_cast<int>(r.u32());
    net.config.head_bias_init = r.f64();
    const std::uint32_t ndil = r.u32();
    if (ndil > 16) throw ShapeTableError("implausible dilation list");
    net.config.candidate_dilations.clear();
    for (std::uint32_t i = 0; i < ndil; ++i) net.config.candidate_dilations.push_back(r.i32());

    const std::uint32_t layer_count = r.u32();
    if (layer_count == 0 || layer_count > 100000) throw ShapeTableError("implausible layer count");

    struct PendingConv {
        int committed = -1;
        bool committed_flag = false;
        std::vector<CandidateSpec> specs, live;
    };
    std::vector<PendingConv> pending(layer_count);

    for (std::uint32_t li = 0; li < layer_count; ++li) {
        LayerSpec layer;
        layer.id = static_cast<int>(li);
        const std::uint8_t kind = r.u8();
        if (kind > 6) throw ShapeTableError("bad layer kind");
        layer.kind = static_cast<LayerKind>(kind);
        layer.input_id = r.i32();
        layer.skip_input_id = r.i32();
        const std::uint32_t nc = r.u32();
        if (nc > 16) throw ShapeTableError("implausible concat list");
        for (std::uint32_t i = 0; i < nc; ++i) layer.concat_inputs.push_back(r.i32());
        layer.c_in = static_cast<int>(r.u32());
        layer.c_out = static_cast<int>(r.u32());
        layer.feature_size = static_cast<int>(r.u32());
        layer.prunable = r.u8() != 0;
        if (layer.c_in < 1 || layer.c_out < 1 || layer.c_in > 100000 || layer.c_out > 100000 ||
            layer.feature_size < 1) {
            throw ShapeTableError("bad channel counts in layer " + std::to_string(li));
        }
        if (layer.input_id < -1 || layer.input_id >= static_cast<int>(li) ||
            layer.skip_input_id < -1 || layer.skip_input_id >= static_cast<int>(li)) {
            throw ShapeTableError("bad producer reference in layer " + std::to_string(li));
        }
        for (int id : layer.concat_inputs) {
            if (id < 0 || id >= static_cast<int>(li)) throw ShapeTableError("bad concat producer");
        }
        if (layer.kind == LayerKind::ConvBlock) {
            auto& pc = pending[li];
            pc.committed_flag = r.u8() != 0;
            pc.committed = r.i32();
            const std::uint32_t nspec = r.u32();
            if (nspec == 0 || nspec > 16) throw ShapeTableError("bad candidate spec count");
            for (std::uint32_t i = 0; i < nspec; ++i) {
                CandidateSpec c;
                c.k = static_cast<int>(r.u32());
                c.dilation = static_cast<int>(r.u32());
                if (c.k < 1 || c.k % 2 == 0 || c.k > 31 || c.dilation < 1 || c.dilation > 16) {
                    throw ShapeTableError("bad candidate kernel spec");
                }
                pc.specs.push_back(c);
            }
            const std::uint32_t nlive = r.u32();
            if (nlive == 0 || nlive > 16) throw ShapeTableError("bad live candidate count");
            for (std::uint32_t i = 0; i < nlive; ++i) {
                CandidateSpec c;
                c.k = static_cast<int>(r.u32());
                c.dilation = static_cast<int>(r.u32());
                if (c.k < 1 || c.k % 2 == 0 || c.k > 31 || c.dilation < 1 || c.dilation > 16) {
                    throw ShapeTableError("bad candidate kernel spec");
                }
                pc.live.push_back(c);
            }
            if (pc.committed_flag) {
                if (pc.live.size() != 1 || pc.committed < 0 ||
                    pc.committed >= static_cast<int>(pc.specs.size())) {
                    throw ShapeTableError("inconsistent committed selection");
                }
            } else if (pc.live.size() != pc.specs.size() || pc.live.size() < 2) {
                throw ShapeTableError("inconsistent candidate lists");
            }
        } else if (layer.kind == LayerKind::Head && layer.c_out != 1) {
            throw ShapeTableError("head must have one output channel");
        }
        net.layers.push_back(std::move(layer));
    }

    // structural consistency: every consumer's input width matches its producer
    {
        auto c_of = [&](int id) {
            return id < 0 ? 1 : net.layers[static_cast<std::size_t>(id)].c_out;
        };
        for (const auto& layer : net.layers) {
            int expect_in = -1;
            switch (layer.kind) {
                case LayerKind::ConvBlock:
                case LayerKind::Remap:
                case LayerKind::Head:
                case LayerKind::Pool:
                case LayerKind::Upsample:
                    expect_in = c_of(layer.input_id);
                    break;
                case LayerKind::SkipAdd:
                    if (c_of(layer.input_id) != c_of(layer.skip_input_id)) {
                        throw ShapeTableError("skip-add operand widths differ");
                    }
                    expect_in = c_of(layer.input_id);
                    if (layer.c_out != expect_in) throw ShapeTableError("skip-add width mismatch");
                    break;
                case LayerKind::Concat: {
                    int c = 0;
                    for (int id : layer.concat_inputs) c += c_of(id);
                    expect_in = c;
                    if (layer.c_out != c) throw ShapeTableError("concat width mismatch");
                    break;
                }
            }
            if (layer.c_in != expect_in) {
                throw ShapeTableError("layer " + std::to_string(layer.id) +
                                      " input width does not match its producer");
            }
            if ((layer.kind == LayerKind::Pool || layer.kind == LayerKind::Upsample) &&
                layer.c_out != layer.c_in) {
                throw ShapeTableError("pass-through layer changed width");
            }
        }
        for (const auto& layer : net.layers) {
            if (layer.kind == LayerKind::SkipAdd) {
                net.skip_edges.emplace_back(layer.skip_input_id, layer.id);
            }
        }
        std::array<int, 3> heads{-1, -1, -1};
        int hn = 0;
        for (const auto& layer : net.layers) {
            if (layer.kind == LayerKind::Head) {
                heads[static_cast<std::size_t>(hn % 3)] = layer.id;
                ++hn;
                if (hn % 3 == 0) net.head_ids.push_back(heads);
            }
        }
        if (hn == 0 || hn % 3 != 0) throw ShapeTableError("head count must be a multiple of 3");
    }

    const std::uint8_t stage = r.u8();
    if (stage > 4) throw ShapeTableError("bad stage cursor");
    st.cursor.stage = static_cast<Stage>(stage);
    st.cursor.epoch_in_stage = static_cast<int>(r.u32());
    st.cursor.select_phase = static_cast<int>(r.u32());
    st.cursor.global_epoch = static_cast<int>(r.u32());
    st.adam.step = static_cast<std::int64_t>(r.u64());
    st.best_precision = r.f64();
    st.baseline_precision = r.f64();
    st.baseline_params = static_cast<std::int64_t>(r.u64());
    std::uint64_t rng_state[4];
    for (auto& vv : rng_state) vv = r.u64();
    st.train_rng.set_state(rng_state);

    for (auto& layer : net.layers) {
        if (layer.kind == LayerKind::ConvBlock) {
            auto& pc = pending[static_cast<std::size_t>(layer.id)];
            auto sel = std::make_shared<SelectState>();
            sel->candidate_specs = pc.specs;
            sel->committed = pc.committed_flag ? pc.committed : -1;
            const int K = static_cast<int>(pc.specs.size());
            for (const auto& c : pc.live) {
                ConvKernel kk;
                kk.weights = Tensor::from_data(
                    {layer.c_out, layer.c_in, c.k, c.k},
                    r.f32blob(static_cast<std::size_t>(layer.c_out) * layer.c_in * c.k * c.k), true);
                kk.bias = Tensor::from_data({layer.c_out},
                                            r.f32blob(static_cast<std::size_t>(layer.c_out)), true);
                kk.dilation = c.dilation;
                sel->candidates.push_back(std::move(kk));
            }
            if (!pc.committed_flag) {
                const int hidden = net.config.cen_hidden;
                sel->cen_w1 = Tensor::from_data({hidden, 2 * K},
                                                r.f32blob(static_cast<std::size_t>(hidden) * 2 * K), true);
                sel->cen_b1 = Tensor::from_data({hidden}, r.f32blob(static_cast<std::size_t>(hidden)), true);
                sel->cen_w2 = Tensor::from_data({K, hidden},
                                                r.f32blob(static_cast<std::size_t>(K) * hidden), true);
                sel->cen_b2 = Tensor::from_data({K}, r.f32blob(static_cast<std::size_t>(K)), true);
                const std::uint32_t nh = r.u32();
                if (nh > 1000000) throw ShapeTableError("implausible alpha history");
                for (std::uint32_t i = 0; i < nh; ++i) {
                    sel->alpha_history.push_back(r.f64blob(static_cast<std::size_t>(K)));
                }
                sel->alpha_accum = r.f64blob(static_cast<std::size_t>(K));
                sel->alpha_batches = static_cast<std::int64_t>(r.u64());
            }
            layer.select = std::move(sel);
        } else if (layer.kind == LayerKind::Head || layer.kind == LayerKind::Remap) {
            layer.conv_w = Tensor::from_data(
                {layer.c_out, layer.c_in, 1, 1},
                r.f32blob(static_cast<std::size_t>(layer.c_out) * layer.c_in), true);
            layer.conv_b = Tensor::from_data({layer.c_out},
                                             r.f32blob(static_cast<std::size_t>(layer.c_out)), true);
        }
    }

    for (const auto& p : net.parameters()) {
        auto& mom = st.adam.moments_for(*p);
        mom.m = r.f32blob(p->data.size());
        mom.v = r.f32blob(p->data.size());
    }
    if (r.pos != r.n) throw ShapeTableError("trailing bytes after checkpoint payload");
    return st;
}

void save_checkpoint(const std::string& path, const TrainerState& state) {
    const auto bytes = serialize_checkpoint(state);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TrainerState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

// ---- evaluation ----------------------------------------------------------------

EvalResult evaluate(const NetworkGraph& net, const std::vector<Sample>& samples,
                    const Config& cfg) {
    GradGuard no_grad(false);
    EvalResult out;
    out.params = net.parameter_count();
    out.images = static_cast<int>(samples.size());
    std::vector<double> errors;
    const auto prm = cfg.infer_params();

    for (const auto& s : samples) {
        auto img = Tensor::from_data({1, 1, s.size, s.size}, s.image);
        auto fr = forward(net, img, false);
        const auto hm = heatmap_from(fr.stacks.back().corners);
        const auto peaks = find_peaks(hm, prm.peak_threshold, prm.nms_radius);
        std::vector<Point> det;
        for (const auto& p : peaks) det.push_back({p.x, p.y});
        const auto m = match_points(s.gt.all_corners(), det, cfg.eval_delta_px);
        out.tp += m.tp;
        out.fp += m.fp;
        out.fn += m.fn;
        errors.insert(errors.end(), m.errors_px.begin(), m.errors_px.end());
    }
    MatchResult agg;
    agg.tp = out.tp;
    agg.fp = out.fp;
    agg.fn = out.fn;
    agg.errors_px = std::move(errors);
    out.precision = precision(agg);
    out.recall = recall(agg);
    out.loc_px = localization_error_px(agg);
    out.loc_cm = localization_error_cm(agg, samples.empty() ? cfg.data_cm_per_px : samples[0].cm_per_px);
    return out;
}

std::vector<CurvePoint> miss_rate_curve(const NetworkGraph& net,
                                        const std::vector<Sample>& samples, const Config& cfg) {
    GradGuard no_grad(false);
    const auto prm = cfg.infer_params();
    std::vector<Heatmap> maps;
    std::vector<std::vector<Point>> gts;
    for (const auto& s : samples) {
        auto img = Tensor::from_data({1, 1, s.size, s.size}, s.image);
        auto fr = forward(net, img, false);
        maps.push_back(heatmap_from(fr.stacks.back().corners));
        gts.push_back(s.gt.all_corners());
    }
    std::vector<CurvePoint> curve;
    for (double thr = 0.05; thr < 0.96; thr += 0.05) {
        int tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            const auto peaks = find_peaks(maps[i], thr, prm.nms_radius);
            std::vector<Point> det;
            for (const auto& p : peaks) det.push_back({p.x, p.y});
            const auto m = match_points(gts[i], det, cfg.eval_delta_px);
            tp += m.tp;
            fp += m.fp;
            fn += m.fn;
        }
        CurvePoint pt;
        pt.threshold = thr;
        pt.miss_rate = (tp + fn) ? static_cast<double>(fn) / (tp + fn) : 0.0;
        pt.fppi = samples.empty() ? 0.0 : static_cast<double>(fp) / static_cast<double>(samples.size());
        curve.push_back(pt);
    }
    return curve;
}

double miss_rate_at_fppi(const std::vector<CurvePoint>& curve, double fppi) {
    if (curve.empty()) return 1.0;
    auto pts = curve;
    std::sort(pts.begin(), pts.end(),
              [](const CurvePoint& a, const CurvePoint& b) { return a.fppi < b.fppi; });
    if (fppi <= pts.front().fppi) return pts.front().miss_rate;
    if (fppi >= pts.back().fppi) return pts.back().miss_rate;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (fppi <= pts[i].fppi) {
            const double span = pts[i].fppi - pts[i - 1].fppi;
            if (span <= 0) return pts[i].miss_rate;
            const double t = (fppi - pts[i - 1].fppi) / span;
            return pts[i - 1].miss_rate * (1 - t) + pts[i].miss_rate * t;
        }
    }
    return pts.back().miss_rate;
}

// ---- pipeline --------------------------------------------------------------------

namespace {

struct RenderedTargets {
    std::vector<double> corners, entry, sep;
};

struct Trainer {
    Config cfg;
    std::string out_dir;
    TrainerState st;
    std::vector<Sample> train_samples, val_samples;
    std::vector<RenderedTargets> train_targets;
    std::ofstream metrics, prune_log;
    std::ofstream fig6, fig7;
    PipelineResult result;

    std::string ckpt_path(const std::string& name) const {
        return out_dir + "/checkpoints/" + name;
    }

    void prepare_out_dir() {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir + "/checkpoints");
        fs::create_directories(out_dir + "/curves");
        std::ofstream cf(out_dir + "/config.cfg");
        cf << cfg.dump();
        metrics.open(out_dir + "/metrics.log", std::ios::app);
        prune_log.open(out_dir + "/prune.log", std::ios::app);
        fig6.open(out_dir + "/curves/fig6_prune.txt", std::ios::app);
        fig7.open(out_dir + "/curves/fig7_finetune.txt", std::ios::app);
        result.metrics_log = out_dir + "/metrics.log";
        result.prune_log = out_dir + "/prune.log";
        result.selection_report = out_dir + "/selection.txt";
    }

    void load_data() {
        LoadedDataset ds = load_dataset(cfg.data_dir);
        train_samples = std::move(ds.train);
        val_samples = std::move(ds.val);
        if (train_samples.empty() || val_samples.empty()) {
            throw MissingInputError("dataset at " + cfg.data_dir + " has an empty split");
        }
        train_targets.clear();
        for (const auto& s : train_samples) {
            auto t = render_heatmap_targets(s.gt, s.size, cfg.target_corner_sigma,
                                            cfg.target_line_sigma);
            RenderedTargets rt;
            rt.corners = t.corners->data;
            rt.entry = t.entry_lines->data;
            rt.sep = t.separating_lines->data;
            train_targets.push_back(std::move(rt));
        }
    }

    struct EpochStats {
        double loss = 0, corner = 0, entry = 0, sep = 0, cen = 0, l1 = 0;
        std::int64_t clamped = 0;
        int steps = 0;
    };

    EpochStats train_epoch(Stage stage) {
        const auto gate = gate_for_stage(stage);
        const auto params = st.net.parameters();
        const int n = static_cast<int>(train_samples.size());
        const int size = cfg.network_input_size;

        std::vector<int> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(st.train_rng.uniform_int(0, i));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }

        EpochStats stats;
        const std::size_t plane = static_cast<std::size_t>(size) * size;
        for (int start = 0; start < n; start += cfg.train_batch_size) {
            const int bsz = std::min(cfg.train_batch_size, n - start);
            auto images = Tensor::create({bsz, 1, size, size});
            TargetHeatmaps targets;
            targets.corners = Tensor::create({bsz, 1, size, size});
            targets.entry_lines = Tensor::create({bsz, 1, size, size});
            targets.separating_lines = Tensor::create({bsz, 1, size, size});
            for (int b = 0; b < bsz; ++b) {
                const int si = order[static_cast<std::size_t>(start + b)];
                const auto& smp = train_samples[static_cast<std::size_t>(si)];
                const auto& tg = train_targets[static_cast<std::size_t>(si)];
                std::copy(smp.image.begin(), smp.image.end(),
                          images->data.begin() + static_cast<std::ptrdiff_t>(b * plane));
                std::copy(tg.corners.begin(), tg.corners.end(),
                          targets.corners->data.begin() + static_cast<std::ptrdiff_t>(b * plane));
                std::copy(tg.entry.begin(), tg.entry.end(),
                          targets.entry_lines->data.begin() + static_cast<std::ptrdiff_t>(b * plane));
                std::copy(tg.sep.begin(), tg.sep.end(),
                          targets.separating_lines->data.begin() +
                              static_cast<std::ptrdiff_t>(b * plane));
            }

            for (const auto& p : params) p->zero_grad();
            auto fr = forward(st.net, images, gate.cen);
            auto lb = total_loss_for_stage(stage, fr.stacks, targets, fr.alphas, &st.net,
                                           cfg.loss_weights());
            backward(lb.total);
            adam_step(params, st.adam);
            if (gate.cen) {
                for (const auto& layer : st.net.layers) {
                    if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) {
                        accumulate_alpha(*layer.select);
                    }
                }
            }
            stats.loss += lb.total->data[0];
            stats.corner += lb.corner;
            stats.entry += lb.entry;
            stats.sep += lb.sep;
            stats.cen += lb.cen;
            stats.l1 += lb.l1;
            stats.clamped += lb.clamped;
            ++stats.steps;
        }
        if (gate.cen) {
            for (const auto& layer : st.net.layers) {
                if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) {
                    end_epoch_alpha(*layer.select);
                }
            }
        }
        return stats;
    }

    EvalResult finish_epoch(Stage stage, const EpochStats& stats) {
        ++st.cursor.global_epoch;
        ++st.cursor.epoch_in_stage;
        const auto ev = evaluate(st.net, val_samples, cfg);
        if (static_cast<int>(stage) < static_cast<int>(Stage::Prune)) {
            st.baseline_precision = std::max(st.baseline_precision, ev.precision);
        }
        char line[512];
        const double inv = stats.steps ? 1.0 / stats.steps : 0.0;
        std::snprintf(line, sizeof line,
                      "epoch %04d stage %s loss %.12g corner %.12g entry %.12g sep %.12g cen %.12g "
                      "l1 %.12g clamped %lld val_precision %.6f val_recall %.6f val_loc_mean %.6f "
                      "val_loc_std %.6f params %lld",
                      st.cursor.global_epoch, stage_name(stage), stats.loss * inv,
                      stats.corner * inv, stats.entry * inv, stats.sep * inv, stats.cen * inv,
                      stats.l1 * inv, static_cast<long long>(stats.clamped), ev.precision,
                      ev.recall, ev.loc_px.defined ? ev.loc_px.mean : -1.0,
                      ev.loc_px.defined ? ev.loc_px.stddev : -1.0,
                      static_cast<long long>(ev.params));
        metrics << line << "\n";
        metrics.flush();
        save_checkpoint(ckpt_path("latest.ckpt"), st);
        return ev;
    }

    void write_selection_report() {
        std::ofstream f(result.selection_report);
        f << "layer  candidates(k,d)            alpha_means                winner(k,d)\n";
        for (const auto& layer : st.net.layers) {
            if (layer.kind != LayerKind::ConvBlock) continue;
            const auto& s = *layer.select;
            std::ostringstream cands, alphas, win;
            for (const auto& c : s.candidate_specs) {
                cands << "(" << c.k << "," << c.dilation << ") ";
            }
            if (!s.alpha_history.empty()) {
                for (double a : alpha_history_mean(s)) {
                    char b[32];
                    std::snprintf(b, sizeof b, "%.4f ", a);
                    alphas << b;
                }
            } else {
                alphas << "-";
            }
            if (s.is_committed()) {
                const auto& c = s.candidate_specs[static_cast<std::size_t>(s.committed)];
                win << "(" << c.k << "," << c.dilation << ")";
            } else {
                win << "-";
            }
            f << layer.id << "  " << cands.str() << "  " << alphas.str() << "  " << win.str()
              << "\n";
        }
    }

    void save_tier_if_crossed() {
        if (st.baseline_params <= 0) return;
        const double frac = static_cast<double>(st.net.parameter_count()) /
                            static_cast<double>(st.baseline_params);
        for (int tier : {60, 40, 25}) {
            if (result.tier_checkpoints.count(tier)) continue;
            if (frac * 100.0 <= tier) {
                const std::string path = ckpt_path("tier_" + std::to_string(tier) + ".ckpt");
                save_checkpoint(path, st);
                result.tier_checkpoints[tier] = path;
            }
        }
    }

    void run(Stage until) {
        prepare_out_dir();
        load_data();
        st.adam.lr = cfg.train_lr;

        // warm-up: heatmap losses only
        if (st.cursor.stage == Stage::Warmup) {
            while (st.cursor.epoch_in_stage < cfg.schedule_warmup_epochs) {
                finish_epoch(Stage::Warmup, train_epoch(Stage::Warmup));
            }
            st.cursor = {Stage::CenPretrain, 0, 0, st.cursor.global_epoch};
        }
        if (static_cast<int>(until) < static_cast<int>(Stage::CenPretrain)) return finalize(until);

        if (st.cursor.stage == Stage::CenPretrain) {
            while (st.cursor.epoch_in_stage < cfg.schedule_cen_epochs) {
                finish_epoch(Stage::CenPretrain, train_epoch(Stage::CenPretrain));
            }
            st.cursor = {Stage::Select, 0, st.cursor.select_phase, st.cursor.global_epoch};
            for (const auto& layer : st.net.layers) {
                if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) {
                    reset_alpha_window(*layer.select);
                }
            }
        }
        if (static_cast<int>(until) < static_cast<int>(Stage::Select)) return finalize(until);

        if (st.cursor.stage == Stage::Select) {
            // one layer at a time, first to last
            for (;;) {
                const auto selectable = st.net.selectable_layer_ids();
                if (selectable.empty()) break;
                while (st.cursor.epoch_in_stage < cfg.schedule_select_epochs_per_layer) {
                    finish_epoch(Stage::Select, train_epoch(Stage::Select));
                }
                const int target = selectable.front();
                auto& sel = *st.net.layers[static_cast<std::size_t>(target)].select;
                std::vector<TensorPtr> dropped;
                commit_selection(sel, &dropped);
                for (const auto& t : dropped) st.adam.drop(*t);
                ++st.cursor.select_phase;
                st.cursor.epoch_in_stage = 0;
                for (const auto& layer : st.net.layers) {
                    if (layer.kind == LayerKind::ConvBlock && !layer.select->is_committed()) {
                        reset_alpha_window(*layer.select);
                    }
                }
                save_checkpoint(ckpt_path("latest.ckpt"), st);
            }
            write_selection_report();
            st.baseline_params = st.net.parameter_count();
            save_checkpoint(ckpt_path("tier_100.ckpt"), st);
            result.tier_checkpoints[100] = ckpt_path("tier_100.ckpt");
            st.cursor = {Stage::Prune, 0, st.cursor.select_phase, st.cursor.global_epoch};
            save_checkpoint(ckpt_path("latest.ckpt"), st);
        }
        result.baseline_params = st.baseline_params;
        if (static_cast<int>(until) < static_cast<int>(Stage::Prune)) return finalize(until);

        if (st.cursor.stage == Stage::Prune) {
            while (st.cursor.epoch_in_stage < cfg.schedule_prune_epochs) {
                const auto stats = train_epoch(Stage::Prune);
                const auto groups = build_prune_groups(st.net);
                PruneOptions opt;
                opt.layer_threshold = cfg.prune_layer_threshold;
                opt.global_count = cfg.prune_global_count;
                opt.after_group_removed = [this] { save_tier_if_crossed(); };
                const auto report = prune_step(st.net, groups, opt, &st.adam);
                const auto ev = finish_epoch(Stage::Prune, stats);

                std::ostringstream removed;
                for (const auto& [layer, ch] : report.removed) removed << layer << ":" << ch << ",";
                char line[512];
                const double frac = st.baseline_params
                                        ? static_cast<double>(ev.params) / st.baseline_params
                                        : 1.0;
                std::snprintf(line, sizeof line,
                              "epoch %04d groups_removed %d rule_a %d rule_b %d params %lld "
                              "fraction %.6f precision %.6f removed %s",
                              st.cursor.global_epoch, report.groups_removed, report.rule_a_groups,
                              report.rule_b_groups, static_cast<long long>(ev.params), frac,
                              ev.precision, removed.str().c_str());
                prune_log << line << "\n";
                prune_log.flush();
                char fl[160];
                std::snprintf(fl, sizeof fl, "%04d %lld %.6f %.6f %.6f\n", st.cursor.global_epoch,
                              static_cast<long long>(ev.params), 1.0 - frac, ev.precision,
                              ev.recall);
                fig6 << fl;
                fig6.flush();
            }
            // fine-tune from the configured tier snapshot when it exists
            const int tier = cfg.schedule_finetune_tier;
            std::string tier_path;
            if (tier < 100 && result.tier_checkpoints.count(tier)) {
                tier_path = result.tier_checkpoints.at(tier);
            } else if (tier == 100) {
                tier_path = ckpt_path("tier_100.ckpt");
            } else if (result.tier_checkpoints.count(tier)) {
                tier_path = result.tier_checkpoints.at(tier);
            }
            if (!tier_path.empty() && std::filesystem::exists(tier_path)) {
                const int global_epoch = st.cursor.global_epoch;
                const double baseline_prec = st.baseline_precision;
                const std::int64_t baseline_par = st.baseline_params;
                st = load_checkpoint(tier_path);
                st.cursor.global_epoch = global_epoch;
                st.baseline_precision = baseline_prec;
                st.baseline_params = baseline_par;
            }
            st.cursor.stage = Stage::Finetune;
            st.cursor.epoch_in_stage = 0;
            st.best_precision = -1.0;
            save_checkpoint(ckpt_path("latest.ckpt"), st);
        }
        if (static_cast<int>(until) < static_cast<int>(Stage::Finetune)) return finalize(until);

        if (st.cursor.stage == Stage::Finetune) {
            while (st.cursor.epoch_in_stage < cfg.schedule_finetune_epochs) {
                const auto stats = train_epoch(Stage::Finetune);
                const auto ev = finish_epoch(Stage::Finetune, stats);
                if (ev.precision > st.best_precision) {
                    st.best_precision = ev.precision;
                    save_checkpoint(ckpt_path("best.ckpt"), st);
                    result.best_checkpoint = ckpt_path("best.ckpt");
                }
                char fl[128];
                std::snprintf(fl, sizeof fl, "%04d %.6f %.6f\n", st.cursor.global_epoch,
                              ev.precision, ev.recall);
                fig7 << fl;
                fig7.flush();
            }
        }
        finalize(until);
    }

    void finalize(Stage until) {
        save_checkpoint(ckpt_path("final.ckpt"), st);
        result.final_checkpoint = ckpt_path("final.ckpt");
        if (result.best_checkpoint.empty()) result.best_checkpoint = result.final_checkpoint;
        result.baseline_precision = st.baseline_precision;
        result.baseline_params = st.baseline_params;
        if (until == Stage::Finetune && std::filesystem::exists(result.best_checkpoint)) {
            const auto best = load_checkpoint(result.best_checkpoint);
            result.final_eval = evaluate(best.net, val_samples, cfg);
        } else {
            result.final_eval = evaluate(st.net, val_samples, cfg);
        }
    }
};

}  // namespace

PipelineResult run_pipeline(const Config& cfg, const std::string& out_dir,
                            const std::string& resume_path, Stage until) {
    set_threads(cfg.threads);
    Trainer tr;
    tr.cfg = cfg;
    tr.out_dir = out_dir;
    if (!resume_path.empty()) {
        tr.st = load_checkpoint(resume_path);
        // tier checkpoints already on disk are picked up again
        for (int tier : {100, 60, 40, 25}) {
            const std::string p = out_dir + "/checkpoints/tier_" + std::to_string(tier) + ".ckpt";
            if (std::filesystem::exists(p)) tr.result.tier_checkpoints[tier] = p;
        }
    } else {
        Rng init_rng(cfg.seed ^ 0x5e1ec7ULL);
        tr.st.net = build_network(cfg.network_config(), init_rng);
        tr.st.train_rng = Rng(cfg.seed ^ 0x7a11ULL);
    }
    tr.st.adam.lr = cfg.train_lr;
    tr.run(until);
    return tr.result;
}

}  // namespace sphg
