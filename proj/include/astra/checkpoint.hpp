#pragma once

// Checkpoint artifact: a text manifest (version, config snapshot, recorded
// metrics, log tail, named array index with shapes and byte offsets)
// followed by an `end` marker and a little-endian 32-bit-float blob, all in
// one file. Weights are quantized to f32 on snapshot, so applying a
// snapshot back to a model reproduces exactly what a later load will see;
// metrics recorded against the applied snapshot are therefore reproducible
// bit-exactly from the file. Writes are atomic (temp file + rename), and
// the bytes are a pure function of the content: no timestamps, no
// map-ordered iteration.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "astra/errors.hpp"
#include "astra/optimizer.hpp"
#include "astra/params.hpp"

namespace astra {

struct CheckpointArray {
    std::vector<std::size_t> shape;
    std::vector<float> values;

    bool operator==(const CheckpointArray&) const = default;
};

struct Checkpoint {
    int version = 1;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<std::string> log_tail;
    std::vector<std::pair<std::string, CheckpointArray>> arrays;

    bool has_optimizer = false;
    std::size_t opt_step = 0;
    double opt_lr = 0.0, opt_beta1 = 0.0, opt_beta2 = 0.0, opt_eps = 0.0, opt_wd = 0.0;

    const CheckpointArray* find(const std::string& name) const {
        for (const auto& [n, a] : arrays) {
            if (n == name) {
                return &a;
            }
        }
        return nullptr;
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw DataError("checkpoint: bad number '" + s + "' in " + what);
    }
}

}  // namespace detail

// Rounds every parameter to f32. Ordered by registration, which fixes the
// blob layout for a given model config.
inline std::vector<std::pair<std::string, CheckpointArray>> snapshot_params(
    const ModelParams& params) {
    std::vector<std::pair<std::string, CheckpointArray>> arrays;
    arrays.reserve(params.tensor_count());
    for (const auto& [name, t] : params.entries()) {
        CheckpointArray a;
        a.shape = t.shape();
        a.values.reserve(t.size());
        for (double v : t.data()) {
            a.values.push_back(static_cast<float>(v));
        }
        arrays.emplace_back(name, std::move(a));
    }
    return arrays;
}

namespace detail {

inline bool is_optimizer_array(const std::string& name) {
    return name.rfind("opt.m/", 0) == 0 || name.rfind("opt.v/", 0) == 0;
}

}  // namespace detail

// Writes checkpoint arrays into the registered parameters. Every parameter
// must be covered and every non-optimizer array must land somewhere.
inline void apply_arrays(const Checkpoint& ckpt, ModelParams& params) {
    std::size_t param_arrays = 0;
    for (const auto& [name, a] : ckpt.arrays) {
        param_arrays += detail::is_optimizer_array(name) ? 0 : 1;
    }
    if (param_arrays != params.tensor_count()) {
        throw DataError("checkpoint: " + std::to_string(param_arrays) +
                        " arrays for a model with " + std::to_string(params.tensor_count()) +
                        " parameters");
    }
    for (const auto& [name, a] : ckpt.arrays) {
        if (detail::is_optimizer_array(name)) {
            continue;
        }
        if (!params.contains(name)) {
            throw DataError("checkpoint: array '" + name + "' is not a model parameter");
        }
        Tensor t = params.at(name);
        if (t.shape() != a.shape) {
            throw DataError("checkpoint: array '" + name + "' has shape " +
                            detail::shape_str(a.shape) + ", model expects " +
                            detail::shape_str(t.shape()));
        }
        auto out = t.mutable_data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = static_cast<double>(a.values[i]);
        }
    }
}

// Optimizer moments ride along as extra arrays named opt.m/<param> and
// opt.v/<param>, ordered like the parameter arrays they mirror.
inline void attach_optimizer(Checkpoint& ckpt, const OptimizerState& state) {
    ckpt.has_optimizer = true;
    ckpt.opt_step = state.step;
    ckpt.opt_lr = state.lr;
    ckpt.opt_beta1 = state.beta1;
    ckpt.opt_beta2 = state.beta2;
    ckpt.opt_eps = state.eps;
    ckpt.opt_wd = state.weight_decay;
    const std::size_t base = ckpt.arrays.size();
    for (std::size_t i = 0; i < base; ++i) {
        // Copied, not referenced: the emplace_backs below reallocate.
        const std::string name = ckpt.arrays[i].first;
        const auto mit = state.m.find(name);
        const auto vit = state.v.find(name);
        if (mit == state.m.end() || vit == state.v.end()) {
            continue;  // parameter never stepped; moments are implicitly zero
        }
        CheckpointArray m, v;
        m.shape = {mit->second.size()};
        v.shape = {vit->second.size()};
        for (double x : mit->second) {
            m.values.push_back(static_cast<float>(x));
        }
        for (double x : vit->second) {
            v.values.push_back(static_cast<float>(x));
        }
        ckpt.arrays.emplace_back("opt.m/" + name, std::move(m));
        ckpt.arrays.emplace_back("opt.v/" + name, std::move(v));
    }
}

inline OptimizerState extract_optimizer(const Checkpoint& ckpt) {
    if (!ckpt.has_optimizer) {
        throw DataError("checkpoint: no optimizer state recorded");
    }
    OptimizerState state;
    state.step = ckpt.opt_step;
    state.lr = ckpt.opt_lr;
    state.beta1 = ckpt.opt_beta1;
    state.beta2 = ckpt.opt_beta2;
    state.eps = ckpt.opt_eps;
    state.weight_decay = ckpt.opt_wd;
    for (const auto& [name, a] : ckpt.arrays) {
        const bool is_m = name.rfind("opt.m/", 0) == 0;
        const bool is_v = name.rfind("opt.v/", 0) == 0;
        if (!is_m && !is_v) {
            continue;
        }
        const std::string param = name.substr(6);
        auto& buf = is_m ? state.m[param] : state.v[param];
        buf.reserve(a.values.size());
        for (float x : a.values) {
            buf.push_back(static_cast<double>(x));
        }
    }
    return state;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ostringstream head;
    head << "astra-checkpoint " << ckpt.version << "\n";
    for (const auto& [k, v] : ckpt.config) {
        head << "config " << k << " = " << v << "\n";
    }
    for (const auto& [k, v] : ckpt.metrics) {
        head << "metric " << k << " = " << detail::format_double(v) << "\n";
    }
    for (const auto& line : ckpt.log_tail) {
        head << "log " << line << "\n";
    }
    if (ckpt.has_optimizer) {
        head << "opt-step " << ckpt.opt_step << "\n";
        head << "opt-hyper " << detail::format_double(ckpt.opt_lr) << " "
             << detail::format_double(ckpt.opt_beta1) << " "
             << detail::format_double(ckpt.opt_beta2) << " "
             << detail::format_double(ckpt.opt_eps) << " "
             << detail::format_double(ckpt.opt_wd) << "\n";
    }
    std::size_t offset = 0;
    for (const auto& [name, a] : ckpt.arrays) {
        head << "array " << name << " " << offset << " " << a.values.size();
        head << " " << a.shape.size();
        for (std::size_t d : a.shape) {
            head << " " << d;
        }
        head << "\n";
        offset += 4 * a.values.size();
    }
    head << "blob-bytes " << offset << "\n";
    head << "end\n";

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError("checkpoint: cannot write '" + tmp + "'");
        }
        const std::string h = head.str();
        out.write(h.data(), static_cast<std::streamsize>(h.size()));
        for (const auto& [name, a] : ckpt.arrays) {
            for (float v : a.values) {
                const auto bits = std::bit_cast<std::uint32_t>(v);
                const char bytes[4] = {static_cast<char>(bits & 0xff),
                                       static_cast<char>((bits >> 8) & 0xff),
                                       static_cast<char>((bits >> 16) & 0xff),
                                       static_cast<char>((bits >> 24) & 0xff)};
                out.write(bytes, 4);
            }
        }
        if (!out) {
            throw DataError("checkpoint: write failed for '" + tmp + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("checkpoint: cannot open '" + path + "'");
    }
    Checkpoint ckpt;
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("checkpoint: empty file '" + path + "'");
    }
    {
        std::istringstream h(line);
        std::string magic;
        int version = 0;
        if (!(h >> magic >> version) || magic != "astra-checkpoint") {
            throw DataError("checkpoint: missing version header in '" + path + "'");
        }
        if (version != 1) {
            throw DataError("checkpoint: unsupported version " + std::to_string(version));
        }
        ckpt.version = version;
    }

    struct IndexEntry {
        std::string name;
        std::size_t offset = 0;
        std::size_t count = 0;
        std::vector<std::size_t> shape;
    };
    std::vector<IndexEntry> index;
    std::size_t blob_bytes = 0;
    bool saw_end = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            saw_end = true;
            break;
        }
        std::istringstream row(line);
        std::string kind;
        row >> kind;
        if (kind == "config" || kind == "metric") {
            std::string key, eq;
            row >> key >> eq;
            if (eq != "=") {
                throw DataError("checkpoint: malformed " + kind + " line '" + line + "'");
            }
            std::string value;
            std::getline(row, value);
            if (!value.empty() && value.front() == ' ') {
                value.erase(value.begin());
            }
            if (kind == "config") {
                ckpt.config.emplace_back(key, value);
            } else {
                ckpt.metrics.emplace_back(key, detail::parse_double(value, "metric " + key));
            }
        } else if (kind == "log") {
            std::string rest;
            std::getline(row, rest);
            if (!rest.empty() && rest.front() == ' ') {
                rest.erase(rest.begin());
            }
            ckpt.log_tail.push_back(rest);
        } else if (kind == "opt-step") {
            ckpt.has_optimizer = true;
            row >> ckpt.opt_step;
        } else if (kind == "opt-hyper") {
            std::string lr, b1, b2, eps, wd;
            if (!(row >> lr >> b1 >> b2 >> eps >> wd)) {
                throw DataError("checkpoint: malformed opt-hyper line");
            }
            ckpt.opt_lr = detail::parse_double(lr, "opt-hyper");
            ckpt.opt_beta1 = detail::parse_double(b1, "opt-hyper");
            ckpt.opt_beta2 = detail::parse_double(b2, "opt-hyper");
            ckpt.opt_eps = detail::parse_double(eps, "opt-hyper");
            ckpt.opt_wd = detail::parse_double(wd, "opt-hyper");
        } else if (kind == "array") {
            IndexEntry e;
            std::size_t rank = 0;
            if (!(row >> e.name >> e.offset >> e.count >> rank)) {
                throw DataError("checkpoint: malformed array line '" + line + "'");
            }
            std::size_t total = 1;
            for (std::size_t r = 0; r < rank; ++r) {
                std::size_t d = 0;
                if (!(row >> d)) {
                    throw DataError("checkpoint: array '" + e.name + "' is missing dims");
                }
                e.shape.push_back(d);
                total *= d;
            }
            if (total != e.count) {
                throw DataError("checkpoint: array '" + e.name + "' count " +
                                std::to_string(e.count) + " does not match its shape");
            }
            index.push_back(std::move(e));
        } else if (kind == "blob-bytes") {
            row >> blob_bytes;
        } else {
            throw DataError("checkpoint: unknown manifest line '" + line + "'");
        }
    }
    if (!saw_end) {
        throw DataError("checkpoint: manifest has no end marker");
    }

    std::vector<char> blob(blob_bytes);
    in.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
    if (static_cast<std::size_t>(in.gcount()) != blob_bytes) {
        throw DataError("checkpoint: blob truncated, expected " + std::to_string(blob_bytes) +
                        " bytes");
    }

    for (auto& e : index) {
        if (e.offset + 4 * e.count > blob_bytes) {
            throw DataError("checkpoint: array '" + e.name + "' overruns the blob");
        }
        CheckpointArray a;
        a.shape = std::move(e.shape);
        a.values.reserve(e.count);
        for (std::size_t i = 0; i < e.count; ++i) {
            const std::size_t base = e.offset + 4 * i;
            const std::uint32_t bits =
                static_cast<std::uint32_t>(static_cast<unsigned char>(blob[base])) |
                (static_cast<std::uint32_t>(static_cast<unsigned char>(blob[base + 1])) << 8) |
                (static_cast<std::uint32_t>(static_cast<unsigned char>(blob[base + 2])) << 16) |
                (static_cast<std::uint32_t>(static_cast<unsigned char>(blob[base + 3])) << 24);
            a.values.push_back(std::bit_cast<float>(bits));
        }
        ckpt.arrays.emplace_back(std::move(e.name), std::move(a));
    }
    return ckpt;
}

}  // namespace astra
