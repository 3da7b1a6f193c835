#pragma once

// Trajectory ingestion and sample construction: table parsing (ground-plane
// xy and bounding-box rows), sliding-window extraction with complete-track
// filtering, window centering, leave-one-out splits, synthetic corpora, and
// rotation/translation augmentation.
//
// Table format: whitespace- or comma-separated numeric rows,
//   xy layout:   frame_id agent_id x y      (optional y-x column order)
//   bbox layout: frame_id agent_id x1 y1 x2 y2
// `#`-prefixed lines are comments.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"

namespace astra {

enum class TableLayout { frame_agent_xy, frame_agent_bbox };
enum class ColumnOrder { xy, yx };

struct TrajectoryRecord {
    std::int64_t frame_id = 0;
    std::int64_t agent_id = 0;
    std::array<double, 4> coords{};  // first coord_dim entries used
};

struct TrajectoryTable {
    std::size_t coord_dim = 2;
    std::vector<TrajectoryRecord> records;  // sorted by (frame_id, agent_id)
};

inline TrajectoryTable load_trajectory_table(const std::string& path, TableLayout layout,
                                             ColumnOrder order = ColumnOrder::xy) {
    if (layout == TableLayout::frame_agent_bbox && order == ColumnOrder::yx) {
        throw ConfigError("trajectory table: y-x column order applies to the xy layout only");
    }
    std::ifstream in(path);
    if (!in) {
        throw DataError("trajectory table: cannot open '" + path + "'");
    }
    const std::size_t coord_dim = layout == TableLayout::frame_agent_xy ? 2 : 4;

    TrajectoryTable table;
    table.coord_dim = coord_dim;
    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::replace(line.begin(), line.end(), ',', ' ');
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        std::istringstream row(line);
        TrajectoryRecord rec;
        double frame_raw = 0.0, agent_raw = 0.0;
        row >> frame_raw >> agent_raw;
        for (std::size_t c = 0; c < coord_dim; ++c) {
            row >> rec.coords[c];
        }
        std::string extra;
        if (row.fail() || (row >> extra)) {
            throw DataError("trajectory table: '" + path + "' line " + std::to_string(line_no) +
                            ": expected " + std::to_string(2 + coord_dim) + " numeric columns");
        }
        rec.frame_id = static_cast<std::int64_t>(std::llround(frame_raw));
        rec.agent_id = static_cast<std::int64_t>(std::llround(agent_raw));
        for (std::size_t c = 0; c < coord_dim; ++c) {
            if (!std::isfinite(rec.coords[c])) {
                throw DataError("trajectory table: '" + path + "' line " +
                                std::to_string(line_no) + ": non-finite coordinate");
            }
        }
        if (order == ColumnOrder::yx) {
            std::swap(rec.coords[0], rec.coords[1]);
        }
        if (!seen.emplace(rec.frame_id, rec.agent_id).second) {
            throw DataError("trajectory table: '" + path + "' line " + std::to_string(line_no) +
                            ": duplicate (frame " + std::to_string(rec.frame_id) + ", agent " +
                            std::to_string(rec.agent_id) + ")");
        }
        table.records.push_back(rec);
    }
    std::sort(table.records.begin(), table.records.end(),
              [](const TrajectoryRecord& a, const TrajectoryRecord& b) {
                  return std::tie(a.frame_id, a.agent_id) < std::tie(b.frame_id, b.agent_id);
              });
    return table;
}

inline void write_trajectory_table(const std::string& path, const TrajectoryTable& table) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("trajectory table: cannot write '" + path + "'");
    }
    out.precision(17);
    for (const auto& r : table.records) {
        out << r.frame_id << " " << r.agent_id;
        for (std::size_t c = 0; c < table.coord_dim; ++c) {
            out << " " << r.coords[c];
        }
        out << "\n";
    }
}

// One training/evaluation sample. Coordinates are stored centered; the
// offset restores raw coordinates exactly (subtraction is inverted by
// adding the identical values back).
struct TrajectoryWindow {
    std::size_t t_obs = 0;
    std::size_t t_pred = 0;
    std::size_t coord_dim = 2;
    std::vector<std::int64_t> agent_ids;  // ascending
    std::vector<std::int64_t> frame_ids;  // t_obs + t_pred entries
    std::vector<double> obs;              // [A][t_obs][C]
    std::vector<double> future;           // [A][t_pred][C]
    std::vector<double> centering_offset;  // C entries (cx,cy or cx,cy,cx,cy)
    bool centered = false;
    // Coordinates as they were before centering. (x - c) + c rounds, so
    // un-centering restores these instead of re-adding the offset. Cleared
    // by augmentation, which has no raw window to return to.
    std::vector<double> raw_obs;
    std::vector<double> raw_future;

    std::size_t agents() const { return agent_ids.size(); }

    std::span<const double> obs_at(std::size_t a, std::size_t t) const {
        return std::span<const double>(obs).subspan((a * t_obs + t) * coord_dim, coord_dim);
    }
    std::span<const double> future_at(std::size_t a, std::size_t t) const {
        return std::span<const double>(future).subspan((a * t_pred + t) * coord_dim, coord_dim);
    }

    // Ground-plane position of agent a at observed step t: the point itself
    // for xy data, the box centroid for bbox data.
    std::array<double, 2> obs_point(std::size_t a, std::size_t t) const {
        const auto c = obs_at(a, t);
        if (coord_dim == 2) {
            return {c[0], c[1]};
        }
        return {0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3])};
    }
};

// Subtracts the mean last-observed position (mean box centroid for bbox
// data) from every coordinate. The mean over agents is accumulated in
// sorted order, so the offset is independent of agent numbering.
inline TrajectoryWindow center_window(TrajectoryWindow w) {
    if (w.centered) {
        throw ContractError("center_window: window is already centered");
    }
    const std::size_t a_count = w.agents();
    if (a_count == 0 || w.t_obs == 0) {
        throw ContractError("center_window: empty window");
    }
    std::vector<double> xs(a_count), ys(a_count);
    for (std::size_t a = 0; a < a_count; ++a) {
        const auto p = w.obs_point(a, w.t_obs - 1);
        xs[a] = p[0];
        ys[a] = p[1];
    }
    const double cx = detail::sum_sorted(xs) / static_cast<double>(a_count);
    const double cy = detail::sum_sorted(ys) / static_cast<double>(a_count);

    w.centering_offset.assign(w.coord_dim, 0.0);
    for (std::size_t c = 0; c < w.coord_dim; ++c) {
        w.centering_offset[c] = (c % 2 == 0) ? cx : cy;
    }
    w.raw_obs = w.obs;
    w.raw_future = w.future;
    for (std::size_t i = 0; i < w.obs.size(); ++i) {
        w.obs[i] -= w.centering_offset[i % w.coord_dim];
    }
    for (std::size_t i = 0; i < w.future.size(); ++i) {
        w.future[i] -= w.centering_offset[i % w.coord_dim];
    }
    w.centered = true;
    return w;
}

inline TrajectoryWindow uncenter_window(TrajectoryWindow w) {
    if (!w.centered) {
        throw ContractError("uncenter_window: window is not centered");
    }
    if (w.raw_obs.size() == w.obs.size() && w.raw_future.size() == w.future.size()) {
        w.obs = std::move(w.raw_obs);
        w.future = std::move(w.raw_future);
    } else {
        // Augmented windows lost their raw coordinates; offset addition is
        // the best available inverse.
        for (std::size_t i = 0; i < w.obs.size(); ++i) {
            w.obs[i] += w.centering_offset[i % w.coord_dim];
        }
        for (std::size_t i = 0; i < w.future.size(); ++i) {
            w.future[i] += w.centering_offset[i % w.coord_dim];
        }
    }
    w.raw_obs.clear();
    w.raw_future.clear();
    w.centering_offset.assign(w.coord_dim, 0.0);
    w.centered = false;
    return w;
}

struct WindowingOptions {
    std::size_t t_obs = 8;
    std::size_t t_pred = 12;
    std::size_t stride = 1;
    // Accept frame sequences with missing grid slots by windowing within
    // maximal gap-free runs instead of failing.
    bool allow_frame_gaps = false;
};

namespace detail {

// Distinct sorted frames, plus the inferred uniform step between them.
inline std::pair<std::vector<std::int64_t>, std::int64_t> frame_grid(
    const TrajectoryTable& table) {
    std::vector<std::int64_t> frames;
    for (const auto& r : table.records) {
        if (frames.empty() || frames.back() != r.frame_id) {
            frames.push_back(r.frame_id);
        }
    }
    std::int64_t step = 0;
    for (std::size_t i = 1; i < frames.size(); ++i) {
        const std::int64_t d = frames[i] - frames[i - 1];
        step = step == 0 ? d : std::min(step, d);
    }
    return {std::move(frames), step == 0 ? 1 : step};
}

}  // namespace detail

// Sliding centered windows over consecutive frames. Agents missing any of a
// window's frames are dropped from that window; windows with no complete
// agent are skipped. Output is independent of input record order.
inline std::vector<TrajectoryWindow> build_windows(const TrajectoryTable& table,
                                                   const WindowingOptions& opts) {
    if (opts.t_obs < 1 || opts.t_pred < 1 || opts.stride < 1) {
        throw ConfigError("build_windows: t_obs, t_pred, and stride must be at least 1");
    }
    const auto [frames, step] = detail::frame_grid(table);
    const std::size_t span = opts.t_obs + opts.t_pred;
    std::vector<TrajectoryWindow> out;
    if (frames.size() < span) {
        return out;
    }

    // Split the frame list into runs of consecutive grid steps.
    std::vector<std::pair<std::size_t, std::size_t>> runs;  // [begin, end) into frames
    std::size_t run_begin = 0;
    for (std::size_t i = 1; i <= frames.size(); ++i) {
        if (i == frames.size() || frames[i] - frames[i - 1] != step) {
            runs.emplace_back(run_begin, i);
            run_begin = i;
            if (i < frames.size() && !opts.allow_frame_gaps) {
                throw DataError("build_windows: frame gap between " +
                                std::to_string(frames[i - 1]) + " and " +
                                std::to_string(frames[i]) + " (step " + std::to_string(step) +
                                "); pass the gap-tolerant flag to window within runs");
            }
        }
    }

    std::map<std::pair<std::int64_t, std::int64_t>, const TrajectoryRecord*> index;
    for (const auto& r : table.records) {
        index[{r.frame_id, r.agent_id}] = &r;
    }

    for (const auto& [begin, end] : runs) {
        if (end - begin < span) {
            continue;
        }
        for (std::size_t start = begin; start + span <= end; start += opts.stride) {
            TrajectoryWindow w;
            w.t_obs = opts.t_obs;
            w.t_pred = opts.t_pred;
            w.coord_dim = table.coord_dim;
            w.frame_ids.assign(frames.begin() + static_cast<std::ptrdiff_t>(start),
                               frames.begin() + static_cast<std::ptrdiff_t>(start + span));

            // Agents present at the first frame are candidates; keep the
            // ones present at every frame of the window.
            std::set<std::int64_t> candidates;
            for (const auto& r : table.records) {
                if (r.frame_id == w.frame_ids.front()) {
                    candidates.insert(r.agent_id);
                }
            }
            for (std::int64_t agent : candidates) {
                bool complete = true;
                for (std::int64_t f : w.frame_ids) {
                    complete = complete && index.count({f, agent}) > 0;
                }
                if (complete) {
                    w.agent_ids.push_back(agent);
                }
            }
            if (w.agent_ids.empty()) {
                continue;
            }
            const std::size_t c_dim = w.coord_dim;
            w.obs.resize(w.agents() * opts.t_obs * c_dim);
            w.future.resize(w.agents() * opts.t_pred * c_dim);
            for (std::size_t a = 0; a < w.agents(); ++a) {
                for (std::size_t t = 0; t < span; ++t) {
                    const auto* rec = index.at({w.frame_ids[t], w.agent_ids[a]});
                    double* dst = t < opts.t_obs
                                      ? &w.obs[(a * opts.t_obs + t) * c_dim]
                                      : &w.future[(a * opts.t_pred + (t - opts.t_obs)) * c_dim];
                    for (std::size_t c = 0; c < c_dim; ++c) {
                        dst[c] = rec->coords[c];
                    }
                }
            }
            out.push_back(center_window(std::move(w)));
        }
    }
    return out;
}

// Observation-only window (t_pred = 0) from a table holding exactly t_obs
// consecutive frames; used by single-window prediction.
inline TrajectoryWindow build_observation_window(const TrajectoryTable& table,
                                                 std::size_t t_obs) {
    const auto [frames, step] = detail::frame_grid(table);
    if (frames.size() != t_obs) {
        throw DataError("observation window: table has " + std::to_string(frames.size()) +
                        " frames, expected exactly " + std::to_string(t_obs));
    }
    for (std::size_t i = 1; i < frames.size(); ++i) {
        if (frames[i] - frames[i - 1] != step) {
            throw DataError("observation window: frame gap between " +
                            std::to_string(frames[i - 1]) + " and " + std::to_string(frames[i]));
        }
    }
    std::map<std::pair<std::int64_t, std::int64_t>, const TrajectoryRecord*> index;
    std::set<std::int64_t> agents;
    for (const auto& r : table.records) {
        index[{r.frame_id, r.agent_id}] = &r;
        agents.insert(r.agent_id);
    }
    TrajectoryWindow w;
    w.t_obs = t_obs;
    w.t_pred = 0;
    w.coord_dim = table.coord_dim;
    w.frame_ids = frames;
    for (std::int64_t agent : agents) {
        bool complete = true;
        for (std::int64_t f : frames) {
            complete = complete && index.count({f, agent}) > 0;
        }
        if (!complete) {
            throw DataError("observation window: agent " + std::to_string(agent) +
                            " is missing frames; complete tracks required");
        }
        w.agent_ids.push_back(agent);
    }
    w.obs.resize(w.agents() * t_obs * w.coord_dim);
    for (std::size_t a = 0; a < w.agents(); ++a) {
        for (std::size_t t = 0; t < t_obs; ++t) {
            const auto* rec = index.at({frames[t], w.agent_ids[a]});
            for (std::size_t c = 0; c < w.coord_dim; ++c) {
                w.obs[(a * t_obs + t) * w.coord_dim + c] = rec->coords[c];
            }
        }
    }
    return center_window(std::move(w));
}

struct SplitPlan {
    std::vector<std::string> scenes;
    std::string held_out;
    std::vector<std::string> train;
};

inline SplitPlan leave_one_out_split(const std::vector<std::string>& scenes,
                                     const std::string& held_out) {
    if (scenes.size() < 2) {
        throw DataError("leave_one_out_split: need at least two scenes to hold one out");
    }
    bool found = false;
    for (const auto& s : scenes) {
        found = found || s == held_out;
    }
    if (!found) {
        std::string names;
        for (const auto& s : scenes) {
            names += (names.empty() ? "" : ", ") + s;
        }
        throw DataError("leave_one_out_split: unknown scene '" + held_out + "' (valid: " +
                        names + ")");
    }
    SplitPlan plan;
    plan.scenes = scenes;
    plan.held_out = held_out;
    for (const auto& s : scenes) {
        if (s != held_out) {
            plan.train.push_back(s);
        }
    }
    return plan;
}

enum class SynthKind { constant_velocity, bimodal_turn, circular };

inline SynthKind synth_kind_from_name(const std::string& name) {
    if (name == "constant_velocity") {
        return SynthKind::constant_velocity;
    }
    if (name == "bimodal_turn") {
        return SynthKind::bimodal_turn;
    }
    if (name == "circular") {
        return SynthKind::circular;
    }
    throw ConfigError("synth: unknown kind '" + name +
                      "' (valid: constant_velocity, bimodal_turn, circular)");
}

struct SynthOptions {
    SynthKind kind = SynthKind::constant_velocity;
    std::size_t n_windows = 32;
    std::size_t agents = 2;
    std::uint64_t seed = 1;
    std::size_t t_obs = 8;
    std::size_t t_pred = 12;
    double speed = 1.0;  // bimodal_turn step length per frame
};

// Deterministic synthetic corpus. Each window occupies its own block of
// t_obs + t_pred consecutive frames with block-unique agent ids, so
// complete-track windowing recovers exactly n_windows windows.
//
// bimodal_turn futures are built from the stored observation tail: the turn
// step is the 90-degree rotation of (last obs - previous obs) as emitted,
// which makes the two candidate modes exactly reconstructable from records.
inline TrajectoryTable synth_generate(const SynthOptions& opts) {
    if (opts.n_windows < 1 || opts.agents < 1 || opts.t_obs < 2 || opts.t_pred < 1) {
        throw ConfigError("synth: need n_windows >= 1, agents >= 1, t_obs >= 2, t_pred >= 1");
    }
    Rng root(opts.seed);
    TrajectoryTable table;
    table.coord_dim = 2;
    const std::size_t span = opts.t_obs + opts.t_pred;

    for (std::size_t w = 0; w < opts.n_windows; ++w) {
        Rng window_rng = root.fork(w);
        for (std::size_t a = 0; a < opts.agents; ++a) {
            Rng agent_rng = window_rng.fork(a);
            const std::int64_t agent_id = static_cast<std::int64_t>(w * opts.agents + a);
            const std::int64_t frame0 = static_cast<std::int64_t>(w * span);
            std::vector<std::array<double, 2>> track;
            track.reserve(span);

            const double x0 = agent_rng.uniform(-4.0, 4.0);
            const double y0 = agent_rng.uniform(-4.0, 4.0);
            switch (opts.kind) {
                case SynthKind::constant_velocity: {
                    const double heading = agent_rng.uniform(0.0, 2.0 * std::numbers::pi);
                    const double speed = agent_rng.uniform(0.5, 1.5);
                    const double vx = speed * std::cos(heading);
                    const double vy = speed * std::sin(heading);
                    track.push_back({x0, y0});
                    for (std::size_t t = 1; t < span; ++t) {
                        track.push_back({track.back()[0] + vx, track.back()[1] + vy});
                    }
                    break;
                }
                case SynthKind::bimodal_turn: {
                    const double heading = agent_rng.uniform(0.0, 2.0 * std::numbers::pi);
                    const bool turn_left = agent_rng.uniform() < 0.5;
                    const double vx = opts.speed * std::cos(heading);
                    const double vy = opts.speed * std::sin(heading);
                    track.push_back({x0, y0});
                    for (std::size_t t = 1; t < opts.t_obs; ++t) {
                        track.push_back({track.back()[0] + vx, track.back()[1] + vy});
                    }
                    const auto& last = track[opts.t_obs - 1];
                    const auto& prev = track[opts.t_obs - 2];
                    const double sx = last[0] - prev[0];
                    const double sy = last[1] - prev[1];
                    const double tx = turn_left ? -sy : sy;
                    const double ty = turn_left ? sx : -sx;
                    for (std::size_t t = 0; t < opts.t_pred; ++t) {
                        track.push_back({track.back()[0] + tx, track.back()[1] + ty});
                    }
                    break;
                }
                case SynthKind::circular: {
                    const double radius = agent_rng.uniform(2.0, 5.0);
                    const double phase = agent_rng.uniform(0.0, 2.0 * std::numbers::pi);
                    const double omega = opts.speed / radius;
                    for (std::size_t t = 0; t < span; ++t) {
                        const double angle = phase + omega * static_cast<double>(t);
                        track.push_back(
                            {x0 + radius * std::cos(angle), y0 + radius * std::sin(angle)});
                    }
                    break;
                }
            }
            for (std::size_t t = 0; t < span; ++t) {
                TrajectoryRecord rec;
                rec.frame_id = frame0 + static_cast<std::int64_t>(t);
                rec.agent_id = agent_id;
                rec.coords = {track[t][0], track[t][1], 0.0, 0.0};
                table.records.push_back(rec);
            }
        }
    }
    std::sort(table.records.begin(), table.records.end(),
              [](const TrajectoryRecord& a, const TrajectoryRecord& b) {
                  return std::tie(a.frame_id, a.agent_id) < std::tie(b.frame_id, b.agent_id);
              });
    return table;
}

struct AugmentOptions {
    bool rotation = true;  // disable for bbox data; rotating axis-aligned boxes is ill-defined
    double translation_sigma = 1.0;
    double probability = 0.5;
};

// With the configured probability, rotates the whole window about the
// centering origin and translates it; obs and future move together, so the
// sample stays geometrically consistent. Draw order is fixed: gate, angle,
// then the two offsets.
inline TrajectoryWindow augment(const TrajectoryWindow& window, Rng& rng,
                                const AugmentOptions& opts) {
    if (!window.centered) {
        throw ContractError("augment: window must be centered");
    }
    if (rng.uniform() >= opts.probability) {
        return window;
    }
    const double theta =
        opts.rotation ? rng.uniform(0.0, 2.0 * std::numbers::pi) : 0.0;
    const double tx = rng.uniform(-opts.translation_sigma, opts.translation_sigma);
    const double ty = rng.uniform(-opts.translation_sigma, opts.translation_sigma);
    const double c = std::cos(theta), s = std::sin(theta);

    TrajectoryWindow out = window;
    auto transform = [&](std::vector<double>& coords) {
        for (std::size_t i = 0; i < coords.size(); i += out.coord_dim) {
            for (std::size_t pair = 0; pair + 1 < out.coord_dim; pair += 2) {
                const double x = coords[i + pair];
                const double y = coords[i + pair + 1];
                coords[i + pair] = c * x - s * y + tx;
                coords[i + pair + 1] = s * x + c * y + ty;
            }
        }
    };
    transform(out.obs);
    transform(out.future);
    out.raw_obs.clear();
    out.raw_future.clear();
    return out;
}

struct SceneEntry {
    std::string name;
    std::string table_path;
    std::string latents_path;  // empty = use the configured fallback provider
};

// Manifest rows: `scene_name table_path [latents_path]`.
inline std::vector<SceneEntry> load_scene_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("scene manifest: cannot open '" + path + "'");
    }
    std::vector<SceneEntry> entries;
    std::set<std::string> names;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        std::istringstream row(line);
        SceneEntry entry;
        row >> entry.name >> entry.table_path;
        if (row.fail()) {
            throw DataError("scene manifest: '" + path + "' line " + std::to_string(line_no) +
                            ": expected 'scene_name table_path [latents_path]'");
        }
        row >> entry.latents_path;  // optional
        if (!names.insert(entry.name).second) {
            throw DataError("scene manifest: '" + path + "' line " + std::to_string(line_no) +
                            ": duplicate scene '" + entry.name + "'");
        }
        entries.push_back(entry);
    }
    if (entries.empty()) {
        throw DataError("scene manifest: '" + path + "' lists no scenes");
    }
    return entries;
}

}  // namespace astra
