#pragma once

// Evaluation metrics. Ground-plane trajectories are scored with ADE/FDE and
// their best-of-K variants; bounding-box trajectories with centroid
// ADE/FDE and per-step coordinate RMSE (ARB/FRB). Dataset-level numbers
// are unweighted means over (window, agent) pairs, accumulated in a fixed
// order.

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "astra/errors.hpp"

namespace astra {

using Point2 = std::array<double, 2>;
using Box4 = std::array<double, 4>;  // x1 y1 x2 y2

inline double ade(std::span<const Point2> pred, std::span<const Point2> gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("ade: " + std::to_string(pred.size()) + " predicted steps vs " +
                         std::to_string(gt.size()) + " ground-truth steps");
    }
    if (pred.empty()) {
        throw ShapeError("ade: empty trajectory");
    }
    double acc = 0.0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        acc += std::hypot(pred[t][0] - gt[t][0], pred[t][1] - gt[t][1]);
    }
    return acc / static_cast<double>(pred.size());
}

inline double fde(std::span<const Point2> pred, std::span<const Point2> gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("fde: " + std::to_string(pred.size()) + " predicted steps vs " +
                         std::to_string(gt.size()) + " ground-truth steps");
    }
    if (pred.empty()) {
        throw ShapeError("fde: empty trajectory");
    }
    const auto& p = pred.back();
    const auto& g = gt.back();
    return std::hypot(p[0] - g[0], p[1] - g[1]);
}

struct MinMetric {
    double value = 0.0;
    std::size_t best_index = 0;
};

inline MinMetric min_ade_k(std::span<const std::vector<Point2>> samples,
                           std::span<const Point2> gt) {
    if (samples.empty()) {
        throw ShapeError("min_ade_k: K must be at least 1");
    }
    MinMetric best{ade(samples[0], gt), 0};
    for (std::size_t k = 1; k < samples.size(); ++k) {
        const double v = ade(samples[k], gt);
        if (v < best.value) {
            best = {v, k};
        }
    }
    return best;
}

inline MinMetric min_fde_k(std::span<const std::vector<Point2>> samples,
                           std::span<const Point2> gt) {
    if (samples.empty()) {
        throw ShapeError("min_fde_k: K must be at least 1");
    }
    MinMetric best{fde(samples[0], gt), 0};
    for (std::size_t k = 1; k < samples.size(); ++k) {
        const double v = fde(samples[k], gt);
        if (v < best.value) {
            best = {v, k};
        }
    }
    return best;
}

inline Point2 bbox_centroid(const Box4& box) {
    return {0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])};
}

inline std::vector<Point2> centroid_track(std::span<const Box4> boxes) {
    std::vector<Point2> out(boxes.size());
    for (std::size_t t = 0; t < boxes.size(); ++t) {
        out[t] = bbox_centroid(boxes[t]);
    }
    return out;
}

// ADE/FDE of the centroid tracks.
inline std::pair<double, double> cade_cfde(std::span<const Box4> pred,
                                           std::span<const Box4> gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("cade_cfde: " + std::to_string(pred.size()) + " predicted boxes vs " +
                         std::to_string(gt.size()) + " ground-truth boxes");
    }
    const auto pc = centroid_track(pred);
    const auto gc = centroid_track(gt);
    return {ade(pc, gc), fde(pc, gc)};
}

enum class ArbVariant {
    mean_of_rmse,  // RB_t per step, then mean over steps
    joint_rmse,    // one RMSE over all steps and coords jointly
};

inline const char* arb_variant_name(ArbVariant v) {
    return v == ArbVariant::mean_of_rmse ? "mean-of-rmse" : "joint-rmse";
}

// Bounding-box RMSE pair (average, final). RB_t = sqrt(mean over the four
// coordinates of squared error at step t); FRB is RB at the last step under
// both variants.
inline std::pair<double, double> arb_frb(std::span<const Box4> pred, std::span<const Box4> gt,
                                         ArbVariant variant = ArbVariant::mean_of_rmse) {
    if (pred.size() != gt.size()) {
        throw ShapeError("arb_frb: " + std::to_string(pred.size()) + " predicted boxes vs " +
                         std::to_string(gt.size()) + " ground-truth boxes");
    }
    if (pred.empty()) {
        throw ShapeError("arb_frb: empty trajectory");
    }
    double rb_sum = 0.0;
    double sq_sum = 0.0;
    double rb_last = 0.0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        double sq = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            const double d = pred[t][c] - gt[t][c];
            sq += d * d;
        }
        const double rb = std::sqrt(sq / 4.0);
        rb_sum += rb;
        sq_sum += sq;
        rb_last = rb;
    }
    const double steps = static_cast<double>(pred.size());
    const double arb = variant == ArbVariant::mean_of_rmse
                           ? rb_sum / steps
                           : std::sqrt(sq_sum / (4.0 * steps));
    return {arb, rb_last};
}

// Running mean per metric; count tracks (window, agent) contributions.
struct MetricAccumulator {
    double sum = 0.0;
    std::size_t count = 0;

    void add(double v) {
        sum += v;
        ++count;
    }
    double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

struct MetricsReport {
    std::size_t k_used = 1;
    std::size_t n_samples_evaluated = 0;  // (window, agent) pairs scored
    // Insertion-ordered metric table.
    std::vector<std::pair<std::string, MetricAccumulator>> table;

    MetricAccumulator& at(const std::string& name) {
        for (auto& [key, acc] : table) {
            if (key == name) {
                return acc;
            }
        }
        table.emplace_back(name, MetricAccumulator{});
        return table.back().second;
    }

    bool has(const std::string& name) const {
        for (const auto& [key, acc] : table) {
            if (key == name && acc.count > 0) {
                return true;
            }
        }
        return false;
    }

    double mean(const std::string& name) const {
        for (const auto& [key, acc] : table) {
            if (key == name) {
                return acc.mean();
            }
        }
        throw ContractError("MetricsReport: no metric named '" + name + "'");
    }

    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "k_used = " << k_used << "\n";
        os << "n_samples_evaluated = " << n_samples_evaluated << "\n";
        for (const auto& [key, acc] : table) {
            if (acc.count > 0) {
                os << key << " = " << acc.mean() << "\n";
            }
        }
        return os.str();
    }

    // Machine-readable table: one `name value count` row per metric.
    void write_table(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw DataError("metrics table: cannot write '" + path + "'");
        }
        out.precision(17);
        for (const auto& [key, acc] : table) {
            if (acc.count > 0) {
                out << key << " " << acc.mean() << " " << acc.count << "\n";
            }
        }
    }
};

}  // namespace astra
