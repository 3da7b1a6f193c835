#pragma once

// Training and evaluation harness. A TrainConfig mirrors the plain-text
// `key = value` run configuration; the loop is single-threaded, seeded, and
// deterministic: window shuffling, augmentation, posterior noise, and
// evaluation sampling each draw from their own fork of the run seed, so the
// final checkpoint bytes are a pure function of (config, data).
//
// Model selection: after every epoch the parameters are snapshotted at
// checkpoint precision (32-bit floats), applied to a scratch model, and the
// validation split is evaluated on that. The retained checkpoint is the one
// with the best validation ADE (deterministic) or min-over-K ADE
// (stochastic), and the metrics stored in it are exactly what a later
// evaluate of the loaded file reproduces.
//
// A non-finite training loss or gradient aborts the run and the best
// checkpoint so far (the initial weights, if no epoch finished) is written.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "astra/checkpoint.hpp"
#include "astra/data_io.hpp"
#include "astra/errors.hpp"
#include "astra/losses.hpp"
#include "astra/metrics.hpp"
#include "astra/model.hpp"
#include "astra/optimizer.hpp"
#include "astra/rng.hpp"
#include "astra/scene_features.hpp"
#include "astra/tensor.hpp"

namespace astra {

enum class SceneLatentSource { file, constant, grid };

struct TrainConfig {
    ModelConfig model;
    std::size_t epochs = 200;
    double lr_max = 1e-3;
    double lr_min = 1e-5;
    double weight_decay = 5e-4;
    std::size_t accumulate = 1;  // windows per optimizer step
    std::size_t k_train = 5;
    std::size_t k_eval = 20;
    double kl_coeff = 1.0;
    bool sample_prior = false;  // best-of-K reconstruction draws from the prior
    BaseLossKind base_loss = BaseLossKind::mse;
    PenaltyKind penalty_kind = PenaltyKind::parabolic;
    double penalty_alpha = 2.0;
    double penalty_beta = 1.0;
    std::uint64_t seed = 1;
    SceneLatentSource latent_source = SceneLatentSource::constant;
    std::size_t grid_g = 8;
    bool augment = false;
    AugmentOptions augment_opts;
    double val_fraction = 0.2;
    std::size_t stride = 1;
    bool allow_frame_gaps = false;
    ColumnOrder column_order = ColumnOrder::xy;
    ArbVariant arb_variant = ArbVariant::mean_of_rmse;
    std::string data_manifest;
    std::string held_out;
    std::string out = "model.ckpt";

    LossConfig loss_config() const {
        LossConfig loss;
        loss.schedule.kind = penalty_kind;
        loss.schedule.alpha = penalty_alpha;
        loss.schedule.beta = penalty_beta;
        loss.schedule.t_pred = model.t_pred;
        loss.base = base_loss;
        loss.k_train = k_train;
        loss.kl_coeff = kl_coeff;
        loss.sample_prior = sample_prior;
        return loss;
    }

    // K actually drawn at evaluation time; deterministic mode forces 1.
    std::size_t eval_k() const {
        return model.mode == PredictionMode::deterministic ? 1 : k_eval;
    }

    void validate() const {
        model.validate();
        loss_config().validate(model.t_pred);
        if (!(lr_max > 0.0) || !(lr_min > 0.0) || lr_min > lr_max) {
            throw ConfigError("TrainConfig: need 0 < lr_min <= lr_max");
        }
        if (weight_decay < 0.0) {
            throw ConfigError("TrainConfig: weight_decay must be nonnegative");
        }
        if (accumulate < 1) {
            throw ConfigError("TrainConfig: accumulate must be at least 1");
        }
        if (k_eval < 1) {
            throw ConfigError("TrainConfig: k_eval must be at least 1");
        }
        if (!(val_fraction >= 0.0) || val_fraction >= 1.0) {
            throw ConfigError("TrainConfig: val_fraction must be in [0, 1)");
        }
        if (stride < 1) {
            throw ConfigError("TrainConfig: stride must be at least 1");
        }
        if (latent_source == SceneLatentSource::grid &&
            model.d_latent != grid_g * grid_g) {
            throw ConfigError("TrainConfig: grid latents have width grid_g^2 = " +
                              std::to_string(grid_g * grid_g) + ", but d_latent is " +
                              std::to_string(model.d_latent));
        }
        if (model.coord_dim == 4 && augment && augment_opts.rotation) {
            throw ConfigError("TrainConfig: rotation augmentation is ill-defined for box "
                              "data; set augment_rotation = false");
        }
    }
};

namespace detail {

// Fork tags for the independent random streams of a run.
constexpr std::uint64_t kShuffleTag = 1;
constexpr std::uint64_t kAugmentTag = 2;
constexpr std::uint64_t kNoiseTag = 3;
constexpr std::uint64_t kEvalTag = 4;
constexpr std::uint64_t kSplitTag = 5;

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return "";
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true") {
        return true;
    }
    if (value == "false") {
        return false;
    }
    throw ConfigError("config: " + key + " must be true or false, got '" + value + "'");
}

inline std::size_t parse_size(const std::string& value, const std::string& key) {
    try {
        std::size_t consumed = 0;
        const unsigned long long v = std::stoull(value, &consumed);
        if (consumed != value.size()) {
            throw std::invalid_argument(value);
        }
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " must be a nonnegative integer, got '" +
                          value + "'");
    }
}

inline double parse_config_double(const std::string& value, const std::string& key) {
    try {
        return parse_double(value, key);
    } catch (const DataError&) {
        throw ConfigError("config: " + key + " must be a number, got '" + value + "'");
    }
}

}  // namespace detail

inline const char* latent_source_name(SceneLatentSource s) {
    switch (s) {
        case SceneLatentSource::file: return "file";
        case SceneLatentSource::constant: return "constant";
        default: return "grid";
    }
}

// Applies one `key = value` assignment. Shared by the config-file parser,
// CLI overrides, and checkpoint config restoration.
inline void set_config_field(TrainConfig& cfg, const std::string& key,
                             const std::string& value) {
    auto size_field = [&](std::size_t& dst) { dst = detail::parse_size(value, key); };
    auto double_field = [&](double& dst) {
        dst = detail::parse_config_double(value, key);
    };
    auto bool_field = [&](bool& dst) { dst = detail::parse_bool(value, key); };

    if (key == "mode") {
        if (value == "deterministic" || value == "det") {
            cfg.model.mode = PredictionMode::deterministic;
        } else if (value == "stochastic" || value == "stoch") {
            cfg.model.mode = PredictionMode::stochastic;
        } else {
            throw ConfigError("config: mode must be deterministic or stochastic, got '" +
                              value + "'");
        }
    } else if (key == "seed") {
        cfg.seed = detail::parse_size(value, key);
    } else if (key == "epochs") {
        size_field(cfg.epochs);
    } else if (key == "lr_max") {
        double_field(cfg.lr_max);
    } else if (key == "lr_min") {
        double_field(cfg.lr_min);
    } else if (key == "weight_decay") {
        double_field(cfg.weight_decay);
    } else if (key == "accumulate") {
        size_field(cfg.accumulate);
    } else if (key == "k_train") {
        size_field(cfg.k_train);
    } else if (key == "k_eval") {
        size_field(cfg.k_eval);
    } else if (key == "kl_coeff") {
        double_field(cfg.kl_coeff);
    } else if (key == "sample_source") {
        if (value == "posterior") {
            cfg.sample_prior = false;
        } else if (value == "prior") {
            cfg.sample_prior = true;
        } else {
            throw ConfigError("config: sample_source must be posterior or prior, got '" +
                              value + "'");
        }
    } else if (key == "base_loss") {
        if (value == "mse") {
            cfg.base_loss = BaseLossKind::mse;
        } else if (value == "smooth_l1") {
            cfg.base_loss = BaseLossKind::smooth_l1;
        } else {
            throw ConfigError("config: base_loss must be mse or smooth_l1, got '" + value +
                              "'");
        }
    } else if (key == "penalty_kind") {
        bool matched = false;
        for (PenaltyKind kind : {PenaltyKind::uniform, PenaltyKind::linear,
                                 PenaltyKind::quadratic, PenaltyKind::parabolic}) {
            if (value == penalty_kind_name(kind)) {
                cfg.penalty_kind = kind;
                matched = true;
            }
        }
        if (!matched) {
            throw ConfigError("config: unknown penalty_kind '" + value + "'");
        }
    } else if (key == "penalty_alpha") {
        double_field(cfg.penalty_alpha);
    } else if (key == "penalty_beta") {
        double_field(cfg.penalty_beta);
    } else if (key == "t_obs") {
        size_field(cfg.model.t_obs);
    } else if (key == "t_pred") {
        size_field(cfg.model.t_pred);
    } else if (key == "coord_dim") {
        size_field(cfg.model.coord_dim);
        cfg.model.embed.coord_dim = cfg.model.coord_dim;
    } else if (key == "stride") {
        size_field(cfg.stride);
    } else if (key == "allow_frame_gaps") {
        bool_field(cfg.allow_frame_gaps);
    } else if (key == "val_fraction") {
        double_field(cfg.val_fraction);
    } else if (key == "column_order") {
        if (value == "xy") {
            cfg.column_order = ColumnOrder::xy;
        } else if (value == "yx") {
            cfg.column_order = ColumnOrder::yx;
        } else {
            throw ConfigError("config: column_order must be xy or yx, got '" + value + "'");
        }
    } else if (key == "latent_source") {
        if (value == "file") {
            cfg.latent_source = SceneLatentSource::file;
        } else if (value == "constant") {
            cfg.latent_source = SceneLatentSource::constant;
        } else if (value == "grid") {
            cfg.latent_source = SceneLatentSource::grid;
        } else {
            throw ConfigError("config: latent_source must be file, constant, or grid, got '" +
                              value + "'");
        }
    } else if (key == "grid_g") {
        size_field(cfg.grid_g);
    } else if (key == "d_latent") {
        size_field(cfg.model.d_latent);
    } else if (key == "d_spatial") {
        size_field(cfg.model.embed.d_spatial);
    } else if (key == "d_temporal") {
        size_field(cfg.model.embed.d_temporal);
    } else if (key == "d_social") {
        size_field(cfg.model.embed.d_social);
    } else if (key == "d_scene") {
        size_field(cfg.model.embed.d_scene);
    } else if (key == "d_model") {
        size_field(cfg.model.encoder.d_model);
    } else if (key == "n_heads") {
        size_field(cfg.model.encoder.n_heads);
    } else if (key == "d_ffn") {
        size_field(cfg.model.encoder.d_ffn);
    } else if (key == "rwpe_k") {
        size_field(cfg.model.rwpe_k);
    } else if (key == "eps_dist") {
        double_field(cfg.model.eps_dist);
    } else if (key == "d_z") {
        size_field(cfg.model.d_z);
    } else if (key == "d_ytilde") {
        size_field(cfg.model.d_ytilde);
    } else if (key == "d_future") {
        size_field(cfg.model.d_future);
    } else if (key == "mlp_hidden") {
        size_field(cfg.model.mlp_hidden);
    } else if (key == "condition_on_c") {
        bool_field(cfg.model.condition_on_c);
    } else if (key == "agent_attention_time_only") {
        bool_field(cfg.model.agent_attention_time_only);
    } else if (key == "temporal_pair_index") {
        bool_field(cfg.model.embed.temporal_pair_index);
    } else if (key == "augment") {
        bool_field(cfg.augment);
    } else if (key == "augment_rotation") {
        bool_field(cfg.augment_opts.rotation);
    } else if (key == "augment_probability") {
        double_field(cfg.augment_opts.probability);
    } else if (key == "augment_translation") {
        double_field(cfg.augment_opts.translation_sigma);
    } else if (key == "arb_variant") {
        if (value == arb_variant_name(ArbVariant::mean_of_rmse)) {
            cfg.arb_variant = ArbVariant::mean_of_rmse;
        } else if (value == arb_variant_name(ArbVariant::joint_rmse)) {
            cfg.arb_variant = ArbVariant::joint_rmse;
        } else {
            throw ConfigError("config: unknown arb_variant '" + value + "'");
        }
    } else if (key == "data") {
        cfg.data_manifest = value;
    } else if (key == "held_out") {
        cfg.held_out = value;
    } else if (key == "out") {
        cfg.out = value;
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

// Fixed-order snapshot of every config field; feeding the pairs back
// through set_config_field reconstructs the config exactly.
inline std::vector<std::pair<std::string, std::string>> serialize_config(
    const TrainConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    auto put = [&](const char* key, std::string value) {
        out.emplace_back(key, std::move(value));
    };
    auto num = [&](const char* key, double v) { put(key, detail::format_double(v)); };
    auto size = [&](const char* key, std::size_t v) { put(key, std::to_string(v)); };
    auto flag = [&](const char* key, bool v) { put(key, v ? "true" : "false"); };

    put("mode", cfg.model.mode == PredictionMode::deterministic ? "deterministic"
                                                                : "stochastic");
    size("seed", cfg.seed);
    size("epochs", cfg.epochs);
    num("lr_max", cfg.lr_max);
    num("lr_min", cfg.lr_min);
    num("weight_decay", cfg.weight_decay);
    size("accumulate", cfg.accumulate);
    size("k_train", cfg.k_train);
    size("k_eval", cfg.k_eval);
    num("kl_coeff", cfg.kl_coeff);
    put("sample_source", cfg.sample_prior ? "prior" : "posterior");
    put("base_loss", cfg.base_loss == BaseLossKind::mse ? "mse" : "smooth_l1");
    put("penalty_kind", penalty_kind_name(cfg.penalty_kind));
    num("penalty_alpha", cfg.penalty_alpha);
    num("penalty_beta", cfg.penalty_beta);
    size("t_obs", cfg.model.t_obs);
    size("t_pred", cfg.model.t_pred);
    size("coord_dim", cfg.model.coord_dim);
    size("stride", cfg.stride);
    flag("allow_frame_gaps", cfg.allow_frame_gaps);
    num("val_fraction", cfg.val_fraction);
    put("column_order", cfg.column_order == ColumnOrder::xy ? "xy" : "yx");
    put("latent_source", latent_source_name(cfg.latent_source));
    size("grid_g", cfg.grid_g);
    size("d_latent", cfg.model.d_latent);
    size("d_spatial", cfg.model.embed.d_spatial);
    size("d_temporal", cfg.model.embed.d_temporal);
    size("d_social", cfg.model.embed.d_social);
    size("d_scene", cfg.model.embed.d_scene);
    size("d_model", cfg.model.encoder.d_model);
    size("n_heads", cfg.model.encoder.n_heads);
    size("d_ffn", cfg.model.encoder.d_ffn);
    size("rwpe_k", cfg.model.rwpe_k);
    num("eps_dist", cfg.model.eps_dist);
    size("d_z", cfg.model.d_z);
    size("d_ytilde", cfg.model.d_ytilde);
    size("d_future", cfg.model.d_future);
    size("mlp_hidden", cfg.model.mlp_hidden);
    flag("condition_on_c", cfg.model.condition_on_c);
    flag("agent_attention_time_only", cfg.model.agent_attention_time_only);
    flag("temporal_pair_index", cfg.model.embed.temporal_pair_index);
    flag("augment", cfg.augment);
    flag("augment_rotation", cfg.augment_opts.rotation);
    num("augment_probability", cfg.augment_opts.probability);
    num("augment_translation", cfg.augment_opts.translation_sigma);
    put("arb_variant", arb_variant_name(cfg.arb_variant));
    put("data", cfg.data_manifest);
    put("held_out", cfg.held_out);
    put("out", cfg.out);
    return out;
}

// Parses a run configuration file: one `key = value` per line, `#` comments.
inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open '" + path + "'");
    }
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = detail::trim(line);
        if (stripped.empty() || stripped[0] == '#') {
            continue;
        }
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not a key = value pair: '" + stripped + "'");
        }
        const std::string key = detail::trim(stripped.substr(0, eq));
        const std::string value = detail::trim(stripped.substr(eq + 1));
        try {
            set_config_field(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) +
                              " of " + path + ")");
        }
    }
    return cfg;
}

inline TrainConfig config_from_checkpoint(const Checkpoint& ckpt) {
    TrainConfig cfg;
    for (const auto& [key, value] : ckpt.config) {
        set_config_field(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

// One scene's windows with the latent table they index into.
struct ScenePack {
    std::string name;
    std::vector<TrajectoryWindow> windows;  // centered
    SceneLatentTable latents;
};

struct Dataset {
    std::vector<ScenePack> scenes;

    std::size_t window_count() const {
        std::size_t n = 0;
        for (const auto& s : scenes) {
            n += s.windows.size();
        }
        return n;
    }
};

struct WindowRef {
    std::size_t scene = 0;
    std::size_t window = 0;
};

// Grid-occupancy latents for every frame of a table, with grid bounds fitted
// to the table's coordinate range.
inline SceneLatentTable grid_scene_latents(const TrajectoryTable& table, std::size_t g) {
    GridBounds bounds{std::numeric_limits<double>::infinity(),
                      std::numeric_limits<double>::infinity(),
                      -std::numeric_limits<double>::infinity(),
                      -std::numeric_limits<double>::infinity()};
    for (const auto& r : table.records) {
        const std::size_t pairs = table.coord_dim / 2;
        double x = 0.0, y = 0.0;
        for (std::size_t p = 0; p < pairs; ++p) {
            x += r.coords[2 * p];
            y += r.coords[2 * p + 1];
        }
        x /= static_cast<double>(pairs);
        y /= static_cast<double>(pairs);
        bounds.x_min = std::min(bounds.x_min, x);
        bounds.x_max = std::max(bounds.x_max, x);
        bounds.y_min = std::min(bounds.y_min, y);
        bounds.y_max = std::max(bounds.y_max, y);
    }
    if (table.records.empty()) {
        throw DataError("grid latents: empty trajectory table");
    }
    if (!(bounds.x_max > bounds.x_min)) {
        bounds.x_min -= 0.5;
        bounds.x_max += 0.5;
    }
    if (!(bounds.y_max > bounds.y_min)) {
        bounds.y_min -= 0.5;
        bounds.y_max += 0.5;
    }

    SceneLatentTable latents(g * g);
    std::vector<std::array<double, 2>> positions;
    std::int64_t frame = table.records.front().frame_id;
    auto flush = [&]() {
        latents.insert(frame, grid_occupancy_encoder(positions, g, bounds));
        positions.clear();
    };
    for (const auto& r : table.records) {
        if (r.frame_id != frame) {
            flush();
            frame = r.frame_id;
        }
        const std::size_t pairs = table.coord_dim / 2;
        double x = 0.0, y = 0.0;
        for (std::size_t p = 0; p < pairs; ++p) {
            x += r.coords[2 * p];
            y += r.coords[2 * p + 1];
        }
        positions.push_back({x / static_cast<double>(pairs), y / static_cast<double>(pairs)});
    }
    flush();
    return latents;
}

inline SceneLatentTable latents_for_table(const TrajectoryTable& table,
                                          const TrainConfig& cfg,
                                          const std::string& latents_path,
                                          const std::string& scene_name) {
    switch (cfg.latent_source) {
        case SceneLatentSource::file:
            if (latents_path.empty()) {
                throw DataError("scene '" + scene_name +
                                "': latent_source is file but the manifest row has no "
                                "latents path");
            }
            return load_scene_latents(latents_path, cfg.model.d_latent);
        case SceneLatentSource::grid:
            return grid_scene_latents(table, cfg.grid_g);
        default: {
            const auto [frames, step] = detail::frame_grid(table);
            (void)step;
            return constant_scene_latents(frames, cfg.model.d_latent);
        }
    }
}

inline ScenePack pack_scene(const TrajectoryTable& table, const TrainConfig& cfg,
                            const std::string& name, const std::string& latents_path = "") {
    ScenePack pack;
    pack.name = name;
    WindowingOptions opts;
    opts.t_obs = cfg.model.t_obs;
    opts.t_pred = cfg.model.t_pred;
    opts.stride = cfg.stride;
    opts.allow_frame_gaps = cfg.allow_frame_gaps;
    pack.windows = build_windows(table, opts);
    pack.latents = latents_for_table(table, cfg, latents_path, name);
    for (const auto& w : pack.windows) {
        for (std::size_t t = 0; t < w.t_obs; ++t) {
            if (!pack.latents.contains(w.frame_ids[t])) {
                throw DataError("scene '" + name + "': no latents for observed frame " +
                                std::to_string(w.frame_ids[t]));
            }
        }
    }
    return pack;
}

inline Dataset load_dataset(const TrainConfig& cfg) {
    if (cfg.data_manifest.empty()) {
        throw ConfigError("config: no data manifest given");
    }
    const TableLayout layout = cfg.model.coord_dim == 4 ? TableLayout::frame_agent_bbox
                                                        : TableLayout::frame_agent_xy;
    Dataset data;
    for (const SceneEntry& entry : load_scene_manifest(cfg.data_manifest)) {
        TrajectoryTable table =
            load_trajectory_table(entry.table_path, layout, cfg.column_order);
        data.scenes.push_back(pack_scene(table, cfg, entry.name, entry.latents_path));
    }
    if (data.window_count() == 0) {
        throw DataError("dataset: no complete windows in any scene");
    }
    return data;
}

namespace detail {

inline std::vector<WindowRef> all_refs(const Dataset& data) {
    std::vector<WindowRef> refs;
    refs.reserve(data.window_count());
    for (std::size_t s = 0; s < data.scenes.size(); ++s) {
        for (std::size_t w = 0; w < data.scenes[s].windows.size(); ++w) {
            refs.push_back({s, w});
        }
    }
    return refs;
}

inline void sort_refs(std::vector<WindowRef>& refs) {
    std::sort(refs.begin(), refs.end(), [](const WindowRef& a, const WindowRef& b) {
        return a.scene != b.scene ? a.scene < b.scene : a.window < b.window;
    });
}

inline std::vector<Point2> point_track(std::span<const double> flat) {
    std::vector<Point2> track(flat.size() / 2);
    for (std::size_t t = 0; t < track.size(); ++t) {
        track[t] = {flat[2 * t], flat[2 * t + 1]};
    }
    return track;
}

inline std::vector<Box4> box_track(std::span<const double> flat) {
    std::vector<Box4> track(flat.size() / 4);
    for (std::size_t t = 0; t < track.size(); ++t) {
        track[t] = {flat[4 * t], flat[4 * t + 1], flat[4 * t + 2], flat[4 * t + 3]};
    }
    return track;
}

inline std::span<const double> future_flat_span(const TrajectoryWindow& w, std::size_t a) {
    return std::span<const double>(w.future)
        .subspan(a * w.t_pred * w.coord_dim, w.t_pred * w.coord_dim);
}

}  // namespace detail

// Validation/training window split. A non-empty held_out names the scene
// whose windows form the validation set; otherwise a seeded shuffle takes
// floor(val_fraction * N) windows. An empty validation selection falls back
// to validating on the training windows themselves, which keeps tiny
// corpora (and epochs=0 runs) evaluable.
struct SplitRefs {
    std::vector<WindowRef> train;
    std::vector<WindowRef> val;
};

inline SplitRefs split_windows(const Dataset& data, const TrainConfig& cfg) {
    SplitRefs split;
    if (!cfg.held_out.empty()) {
        bool found = false;
        for (std::size_t s = 0; s < data.scenes.size(); ++s) {
            const bool held = data.scenes[s].name == cfg.held_out;
            found = found || held;
            for (std::size_t w = 0; w < data.scenes[s].windows.size(); ++w) {
                (held ? split.val : split.train).push_back({s, w});
            }
        }
        if (!found) {
            throw DataError("split: no scene named '" + cfg.held_out + "' in the dataset");
        }
        if (split.train.empty()) {
            throw DataError("split: holding out '" + cfg.held_out +
                            "' leaves no training windows");
        }
    } else {
        std::vector<WindowRef> refs = detail::all_refs(data);
        Rng rng = Rng(cfg.seed).fork(detail::kSplitTag);
        rng.shuffle(refs);
        const auto n_val = static_cast<std::size_t>(
            cfg.val_fraction * static_cast<double>(refs.size()));
        split.val.assign(refs.begin(), refs.begin() + static_cast<std::ptrdiff_t>(n_val));
        split.train.assign(refs.begin() + static_cast<std::ptrdiff_t>(n_val), refs.end());
        detail::sort_refs(split.train);
        detail::sort_refs(split.val);
    }
    if (split.val.empty()) {
        split.val = split.train;
    }
    return split;
}

// Scores `refs` with seeded sampling; the accumulation order is the order of
// `refs`, so a report is a pure function of (model, data, refs, k, seed).
inline MetricsReport evaluate_model(const Model& model, const Dataset& data,
                                    std::span<const WindowRef> refs, std::size_t k,
                                    std::uint64_t eval_seed,
                                    ArbVariant arb = ArbVariant::mean_of_rmse) {
    const ModelConfig& mc = model.config();
    if (mc.mode == PredictionMode::deterministic && k != 1) {
        throw ContractError("evaluate: deterministic checkpoint yields exactly one "
                            "trajectory, cannot draw k=" +
                            std::to_string(k));
    }
    const bool stochastic = mc.mode == PredictionMode::stochastic;
    const bool boxes = mc.coord_dim == 4;
    Rng root(eval_seed);
    MetricsReport report;
    report.k_used = k;
    for (const WindowRef& ref : refs) {
        const ScenePack& scene = data.scenes[ref.scene];
        const TrajectoryWindow& w = scene.windows[ref.window];
        PredictionSet set = model.predict(w, scene.latents, k,
                                          root.fork(detail::kEvalTag, ref.scene, ref.window));
        for (std::size_t a = 0; a < w.agents(); ++a) {
            if (!boxes) {
                const std::vector<Point2> gt = detail::point_track(detail::future_flat_span(w, a));
                if (!stochastic) {
                    const std::vector<Point2> pred = detail::point_track(set.trajectory(a, 0));
                    report.at("ade").add(ade(pred, gt));
                    report.at("fde").add(fde(pred, gt));
                } else {
                    std::vector<std::vector<Point2>> samples(k);
                    for (std::size_t s = 0; s < k; ++s) {
                        samples[s] = detail::point_track(set.trajectory(a, s));
                    }
                    report.at("min_ade_k").add(min_ade_k(samples, gt).value);
                    report.at("min_fde_k").add(min_fde_k(samples, gt).value);
                }
            } else {
                const std::vector<Box4> gt = detail::box_track(detail::future_flat_span(w, a));
                if (!stochastic) {
                    const std::vector<Box4> pred = detail::box_track(set.trajectory(a, 0));
                    const auto [cade, cfde] = cade_cfde(pred, gt);
                    report.at("cade").add(cade);
                    report.at("cfde").add(cfde);
                    const auto [arb_v, frb_v] = arb_frb(pred, gt, arb);
                    report.at("arb").add(arb_v);
                    report.at("frb").add(frb_v);
                } else {
                    const std::vector<Point2> gt_c = centroid_track(gt);
                    std::vector<std::vector<Point2>> samples(k);
                    for (std::size_t s = 0; s < k; ++s) {
                        samples[s] = centroid_track(detail::box_track(set.trajectory(a, s)));
                    }
                    report.at("min_cade_k").add(min_ade_k(samples, gt_c).value);
                    report.at("min_cfde_k").add(min_fde_k(samples, gt_c).value);
                }
            }
            ++report.n_samples_evaluated;
        }
    }
    return report;
}

// The metric that drives best-checkpoint selection.
inline std::string selection_metric(const TrainConfig& cfg) {
    const bool boxes = cfg.model.coord_dim == 4;
    if (cfg.model.mode == PredictionMode::deterministic) {
        return boxes ? "cade" : "ade";
    }
    return boxes ? "min_cade_k" : "min_ade_k";
}

struct TrainResult {
    Checkpoint checkpoint;
    std::string checkpoint_path;
    std::vector<std::string> log;
    MetricsReport best_report;
    double best_val = 0.0;
    std::size_t best_epoch = 0;  // 0 = initial weights
    bool diverged = false;
};

namespace detail {

inline Checkpoint snapshot_to_checkpoint(
    std::vector<std::pair<std::string, CheckpointArray>> arrays) {
    Checkpoint ckpt;
    ckpt.arrays = std::move(arrays);
    return ckpt;
}

inline std::string epoch_log_line(std::size_t epoch, double lr, double train_loss,
                                  const MetricsReport& report) {
    std::ostringstream os;
    os << "epoch " << epoch << " lr " << format_double(lr) << " train_loss "
       << format_double(train_loss);
    for (const auto& [name, acc] : report.table) {
        if (acc.count > 0) {
            os << " val_" << name << " " << format_double(acc.mean());
        }
    }
    return os.str();
}

}  // namespace detail

// Seeded training run over an already-loaded dataset. Writes the best
// checkpoint to cfg.out (plus the full log to cfg.out + ".log") unless
// cfg.out is empty.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data) {
    cfg.validate();
    if (data.window_count() == 0) {
        throw DataError("train: dataset has no windows");
    }
    const SplitRefs split = split_windows(data, cfg);
    const LossConfig loss_cfg = cfg.loss_config();
    const std::string sel = selection_metric(cfg);

    Model model(cfg.model, cfg.seed);
    Model scratch(cfg.model, cfg.seed);
    OptimizerState opt;
    opt.weight_decay = cfg.weight_decay;
    Rng root(cfg.seed);

    TrainResult result;
    auto evaluate_quantized = [&](const std::vector<std::pair<std::string, CheckpointArray>>&
                                      arrays) {
        apply_arrays(detail::snapshot_to_checkpoint(arrays), scratch.params());
        return evaluate_model(scratch, data, split.val, cfg.eval_k(), cfg.seed,
                              cfg.arb_variant);
    };

    std::vector<std::pair<std::string, CheckpointArray>> best_arrays =
        snapshot_params(model.params());
    result.best_report = evaluate_quantized(best_arrays);
    result.best_val = result.best_report.mean(sel);
    result.best_epoch = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.diverged; ++epoch) {
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        std::vector<WindowRef> order = split.train;
        Rng shuffle_rng = root.fork(detail::kShuffleTag, epoch);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t group = 0;
        model.params().zero_grad();
        for (std::size_t step = 0; step < order.size(); ++step) {
            const ScenePack& scene = data.scenes[order[step].scene];
            TrajectoryWindow window = scene.windows[order[step].window];
            try {
                if (cfg.augment) {
                    Rng aug_rng = root.fork(detail::kAugmentTag, epoch, step);
                    window = augment(window, aug_rng, cfg.augment_opts);
                }
                Tensor loss =
                    model.training_loss(window, scene.latents, loss_cfg,
                                        root.fork(detail::kNoiseTag, epoch, step));
                if (!std::isfinite(loss.item())) {
                    throw NumericError("training loss is not finite");
                }
                loss_sum += loss.item();
                backward(cfg.accumulate == 1
                             ? loss
                             : scale(loss, 1.0 / static_cast<double>(cfg.accumulate)));
                if (++group == cfg.accumulate) {
                    adamw_step(model.params(), opt);
                    model.params().zero_grad();
                    group = 0;
                }
            } catch (const NumericError& e) {
                result.diverged = true;
                result.log.push_back("epoch " + std::to_string(epoch + 1) + " step " +
                                     std::to_string(step + 1) + " diverged: " + e.what());
                break;
            }
        }
        if (result.diverged) {
            break;
        }
        if (group > 0) {
            adamw_step(model.params(), opt);
            model.params().zero_grad();
        }

        auto arrays = snapshot_params(model.params());
        MetricsReport report = evaluate_quantized(arrays);
        const double val = report.mean(sel);
        result.log.push_back(detail::epoch_log_line(
            epoch + 1, opt.lr,
            order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size()), report));
        if (val < result.best_val) {
            result.best_val = val;
            result.best_epoch = epoch + 1;
            best_arrays = std::move(arrays);
            result.best_report = std::move(report);
        }
    }

    Checkpoint ckpt;
    ckpt.config = serialize_config(cfg);
    ckpt.metrics.emplace_back("best_epoch", static_cast<double>(result.best_epoch));
    ckpt.metrics.emplace_back("diverged", result.diverged ? 1.0 : 0.0);
    for (const auto& [name, acc] : result.best_report.table) {
        if (acc.count > 0) {
            ckpt.metrics.emplace_back("val_" + name, acc.mean());
        }
    }
    const std::size_t tail =
        result.log.size() > 20 ? result.log.size() - 20 : 0;
    ckpt.log_tail.assign(result.log.begin() + static_cast<std::ptrdiff_t>(tail),
                         result.log.end());
    ckpt.arrays = std::move(best_arrays);
    result.checkpoint = std::move(ckpt);

    if (!cfg.out.empty()) {
        save_checkpoint(cfg.out, result.checkpoint);
        result.checkpoint_path = cfg.out;
        std::ofstream log_out(cfg.out + ".log");
        if (!log_out) {
            throw DataError("train: cannot write log '" + cfg.out + ".log'");
        }
        for (const std::string& line : result.log) {
            log_out << line << "\n";
        }
    }
    return result;
}

inline TrainResult train(const TrainConfig& cfg) { return train(cfg, load_dataset(cfg)); }

// Scores a saved checkpoint on every window of `data`. k = 0 means the
// checkpoint's own k_eval; the seed defaults to the recorded run seed, which
// is what reproduces the stored validation metrics when `data` covers the
// run's validation windows in the same order.
inline MetricsReport evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& data,
                                         std::size_t k = 0,
                                         std::optional<std::uint64_t> seed = std::nullopt) {
    const TrainConfig cfg = config_from_checkpoint(ckpt);
    Model model(cfg.model, cfg.seed);
    apply_arrays(ckpt, model.params());
    std::vector<WindowRef> refs = detail::all_refs(data);
    return evaluate_model(model, data, refs, k == 0 ? cfg.eval_k() : k,
                          seed.value_or(cfg.seed), cfg.arb_variant);
}

// Expands a training log into one two-column series file per metric
// (`<out_dir>/<name>.dat`, rows `epoch value`) for external plotting.
inline std::vector<std::string> write_plot_series(const std::vector<std::string>& log_lines,
                                                  const std::string& out_dir) {
    std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>> series;
    auto at = [&](const std::string& name)
        -> std::vector<std::pair<std::size_t, double>>& {
        for (auto& [key, rows] : series) {
            if (key == name) {
                return rows;
            }
        }
        series.emplace_back(name, std::vector<std::pair<std::size_t, double>>{});
        return series.back().second;
    };
    for (const std::string& line : log_lines) {
        std::istringstream in(line);
        std::string word;
        std::size_t epoch = 0;
        if (!(in >> word) || word != "epoch" || !(in >> epoch)) {
            continue;  // divergence notes and other non-epoch lines
        }
        std::string key, value;
        while (in >> key >> value) {
            try {
                at(key).emplace_back(epoch, detail::parse_double(value, key));
            } catch (const DataError&) {
                throw DataError("plot series: bad value '" + value + "' for " + key +
                                " in line: " + line);
            }
        }
    }
    if (series.empty()) {
        throw DataError("plot series: no epoch lines in the log");
    }
    std::vector<std::string> written;
    for (const auto& [name, rows] : series) {
        const std::string path = out_dir + "/" + name + ".dat";
        std::ofstream out(path);
        if (!out) {
            throw DataError("plot series: cannot write '" + path + "'");
        }
        for (const auto& [epoch, value] : rows) {
            out << epoch << " " << detail::format_double(value) << "\n";
        }
        written.push_back(path);
    }
    return written;
}

}  // namespace astra
