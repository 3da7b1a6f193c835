#pragma once

// Per-frame scene latent vectors. A table can be loaded from the plain-text
// latent format, filled with zeros (the no-frame-encoding ablation), or
// computed from agent positions with a grid occupancy encoder.
//
// Latent table file format: first line `dim <D>`, then one row per frame
// `<frame_id> <v1> ... <vD>`; lines starting with `#` are ignored.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "astra/errors.hpp"

namespace astra {

class SceneLatentTable {
public:
    SceneLatentTable() = default;
    explicit SceneLatentTable(std::size_t dim) : dim_(dim) {
        if (dim_ < 1) {
            throw ContractError("SceneLatentTable: dim must be at least 1");
        }
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    bool contains(std::int64_t frame_id) const { return entries_.count(frame_id) > 0; }

    void insert(std::int64_t frame_id, std::vector<double> values) {
        if (values.size() != dim_) {
            throw DataError("scene latents: frame " + std::to_string(frame_id) + " has " +
                            std::to_string(values.size()) + " values, table dim is " +
                            std::to_string(dim_));
        }
        for (double v : values) {
            if (!std::isfinite(v)) {
                throw DataError("scene latents: non-finite value for frame " +
                                std::to_string(frame_id));
            }
        }
        if (!entries_.emplace(frame_id, std::move(values)).second) {
            throw DataError("scene latents: duplicate frame " + std::to_string(frame_id));
        }
    }

    // Missing frames are an error, never a silent default.
    const std::vector<double>& at(std::int64_t frame_id) const {
        auto it = entries_.find(frame_id);
        if (it == entries_.end()) {
            throw DataError("scene latents: no entry for frame " + std::to_string(frame_id));
        }
        return it->second;
    }

    const std::map<std::int64_t, std::vector<double>>& entries() const { return entries_; }

private:
    std::size_t dim_ = 0;
    std::map<std::int64_t, std::vector<double>> entries_;
};

// expected_dim = 0 accepts whatever the header declares.
inline SceneLatentTable load_scene_latents(const std::string& path, std::size_t expected_dim = 0) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("scene latents: cannot open '" + path + "'");
    }
    std::string line;
    std::size_t line_no = 0;
    std::size_t dim = 0;
    bool header_seen = false;
    SceneLatentTable table;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        std::istringstream row(line);
        if (!header_seen) {
            std::string keyword;
            row >> keyword >> dim;
            if (keyword != "dim" || row.fail() || dim < 1) {
                throw DataError("scene latents: '" + path + "' line " + std::to_string(line_no) +
                                ": expected header 'dim <D>'");
            }
            if (expected_dim > 0 && dim != expected_dim) {
                throw DataError("scene latents: '" + path + "' declares dim " +
                                std::to_string(dim) + ", expected " +
                                std::to_string(expected_dim));
            }
            table = SceneLatentTable(dim);
            header_seen = true;
            continue;
        }
        std::int64_t frame_id = 0;
        row >> frame_id;
        std::vector<double> values(dim);
        for (auto& v : values) {
            row >> v;
        }
        std::string extra;
        if (row.fail() || (row >> extra)) {
            throw DataError("scene latents: '" + path + "' line " + std::to_string(line_no) +
                            ": expected '<frame_id> <v1> ... <v" + std::to_string(dim) + ">'");
        }
        try {
            table.insert(frame_id, std::move(values));
        } catch (const DataError& e) {
            throw DataError("scene latents: '" + path + "' line " + std::to_string(line_no) +
                            ": " + e.what());
        }
    }
    if (!header_seen) {
        throw DataError("scene latents: '" + path + "' is missing the 'dim <D>' header");
    }
    return table;
}

// Zero latents for every listed frame: scene tokens then differ only by
// their temporal encoding (the no-frame-encoding ablation arm).
inline SceneLatentTable constant_scene_latents(const std::vector<std::int64_t>& frames,
                                               std::size_t dim) {
    SceneLatentTable table(dim);
    for (std::int64_t f : frames) {
        if (!table.contains(f)) {
            table.insert(f, std::vector<double>(dim, 0.0));
        }
    }
    return table;
}

struct GridBounds {
    double x_min = 0.0, y_min = 0.0, x_max = 1.0, y_max = 1.0;
};

// Occupancy counts on a g x g grid over `bounds`, row-major, normalized by
// the maximum cell count. Out-of-bounds points land in border cells.
inline std::vector<double> grid_occupancy_encoder(
    const std::vector<std::array<double, 2>>& frame_positions, std::size_t g,
    const GridBounds& bounds) {
    if (g < 1) {
        throw ContractError("grid_occupancy_encoder: g must be at least 1");
    }
    if (!(bounds.x_max > bounds.x_min) || !(bounds.y_max > bounds.y_min)) {
        throw ConfigError("grid_occupancy_encoder: degenerate bounds");
    }
    std::vector<double> cells(g * g, 0.0);
    const double gx = static_cast<double>(g) / (bounds.x_max - bounds.x_min);
    const double gy = static_cast<double>(g) / (bounds.y_max - bounds.y_min);
    for (const auto& p : frame_positions) {
        auto clip = [g](double raw) {
            const auto idx = static_cast<std::ptrdiff_t>(std::floor(raw));
            return static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(g) - 1));
        };
        const std::size_t cx = clip((p[0] - bounds.x_min) * gx);
        const std::size_t cy = clip((p[1] - bounds.y_min) * gy);
        cells[cy * g + cx] += 1.0;
    }
    double max_count = 0.0;
    for (double c : cells) {
        max_count = std::max(max_count, c);
    }
    if (max_count > 0.0) {
        for (auto& c : cells) {
            c /= max_count;
        }
    }
    return cells;
}

}  // namespace astra
