#pragma once

// Named parameter registry. Registration order is the canonical order used
// by the optimizer and the checkpoint format, so construction must be
// deterministic for a given config.

#include <cstddef>
#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "astra/errors.hpp"
#include "astra/rng.hpp"
#include "astra/tensor.hpp"

namespace astra {

class ModelParams {
public:
    // Returned by value: a Tensor is a handle onto a shared node, so the
    // copy stays wired to the registered entry while being immune to the
    // entries vector reallocating on later adds.
    Tensor add(const std::string& name, std::vector<std::size_t> shape) {
        if (index_.count(name)) {
            throw ContractError("ModelParams: duplicate parameter '" + name + "'");
        }
        index_[name] = entries_.size();
        entries_.emplace_back(name, Tensor::zeros(std::move(shape), true));
        return entries_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("ModelParams: unknown parameter '" + name + "'");
        }
        return entries_[it->second].second;
    }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ContractError("ModelParams: unknown parameter '" + name + "'");
        }
        return entries_[it->second].second;
    }

    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    std::size_t tensor_count() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_) {
            n += t.size();
        }
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : entries_) {
            t.zero_grad();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
inline void init_uniform_fan(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.mutable_data()) {
        v = rng.uniform(-limit, limit);
    }
}

// Registers and initializes a dense stack prefix.0 .. prefix.(L-1).
// widths = {in, hidden..., out}; hidden layers use hidden_act, the last
// layer uses out_act; biases start at zero.
inline std::vector<DenseLayer> make_mlp(ModelParams& params, const std::string& prefix,
                                        std::span<const std::size_t> widths,
                                        Activation hidden_act, Activation out_act, Rng& rng) {
    if (widths.size() < 2) {
        throw ContractError("make_mlp: need at least input and output widths for '" + prefix +
                            "'");
    }
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const std::string base = prefix + "." + std::to_string(l);
        Tensor w = params.add(base + ".weight", {widths[l], widths[l + 1]});
        Tensor b = params.add(base + ".bias", {widths[l + 1]});
        init_uniform_fan(w, widths[l], widths[l + 1], rng);
        const bool last = (l + 2 == widths.size());
        layers.push_back({w, b, last ? out_act : hidden_act});
    }
    return layers;
}

inline std::vector<DenseLayer> make_mlp(ModelParams& params, const std::string& prefix,
                                        std::initializer_list<std::size_t> widths,
                                        Activation hidden_act, Activation out_act, Rng& rng) {
    std::vector<std::size_t> w(widths);
    return make_mlp(params, prefix, std::span<const std::size_t>(w), hidden_act, out_act, rng);
}

}  // namespace astra
