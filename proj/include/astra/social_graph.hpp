#pragma once

// Per-frame weighted social graph over agents and its Random-Walk Positional
// Encoding. Graph math runs on plain doubles: positions are data, not
// learned quantities, so nothing here participates in differentiation.
//
// Reductions over the agent axis (degrees, matrix products) accumulate in
// sorted value order, keeping results bit-identical when agents are
// renumbered.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astra/errors.hpp"
#include "astra/tensor.hpp"

namespace astra {

struct SocialGraph {
    std::size_t n_agents = 0;
    std::vector<double> weights;  // n x n, symmetric, zero diagonal
    std::vector<std::int64_t> agent_ids;

    double weight(std::size_t i, std::size_t j) const { return weights[i * n_agents + j]; }
};

struct RwpeMatrix {
    std::size_t n_agents = 0;
    std::size_t k = 0;
    std::vector<double> values;  // n x k, values[i*k + s] = (M^(s+1))_ii

    double at(std::size_t i, std::size_t s) const { return values[i * k + s]; }
};

// Complete undirected graph with reciprocal-distance edges. Distances are
// clamped below by eps_dist so coincident agents get weight 1/eps_dist.
inline SocialGraph build_social_graph(const std::vector<std::array<double, 2>>& positions,
                                      double eps_dist,
                                      const std::vector<std::int64_t>& agent_ids = {}) {
    if (positions.empty()) {
        throw ShapeError("build_social_graph: at least one agent required");
    }
    if (!(eps_dist > 0.0)) {
        throw ContractError("build_social_graph: eps_dist must be positive");
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (!std::isfinite(positions[i][0]) || !std::isfinite(positions[i][1])) {
            throw DataError("build_social_graph: non-finite coordinates for agent index " +
                            std::to_string(i));
        }
    }
    if (!agent_ids.empty() && agent_ids.size() != positions.size()) {
        throw ShapeError("build_social_graph: " + std::to_string(agent_ids.size()) +
                         " agent ids for " + std::to_string(positions.size()) + " agents");
    }

    SocialGraph g;
    g.n_agents = positions.size();
    g.weights.assign(g.n_agents * g.n_agents, 0.0);
    if (agent_ids.empty()) {
        g.agent_ids.resize(g.n_agents);
        for (std::size_t i = 0; i < g.n_agents; ++i) {
            g.agent_ids[i] = static_cast<std::int64_t>(i);
        }
    } else {
        g.agent_ids = agent_ids;
    }
    for (std::size_t i = 0; i < g.n_agents; ++i) {
        for (std::size_t j = i + 1; j < g.n_agents; ++j) {
            const double dx = positions[i][0] - positions[j][0];
            const double dy = positions[i][1] - positions[j][1];
            const double d = std::sqrt(dx * dx + dy * dy);
            const double w = 1.0 / std::max(d, eps_dist);
            g.weights[i * g.n_agents + j] = w;
            g.weights[j * g.n_agents + i] = w;
        }
    }
    return g;
}

// Row-stochastic transition matrix M = D^-1 W; zero-degree rows stay zero.
inline std::vector<double> random_walk_matrix(const SocialGraph& g) {
    const std::size_t n = g.n_agents;
    std::vector<double> m(n * n, 0.0);
    std::vector<double> terms;
    for (std::size_t i = 0; i < n; ++i) {
        terms.assign(g.weights.begin() + static_cast<std::ptrdiff_t>(i * n),
                     g.weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
        const double degree = detail::sum_sorted(terms);
        if (degree == 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < n; ++j) {
            m[i * n + j] = g.weights[i * n + j] / degree;
        }
    }
    return m;
}

// Diagonal return probabilities of M^1 .. M^k.
inline RwpeMatrix rwpe(const SocialGraph& g, std::size_t k) {
    if (k < 1) {
        throw ContractError("rwpe: k must be at least 1");
    }
    const std::size_t n = g.n_agents;
    const std::vector<double> m = random_walk_matrix(g);

    RwpeMatrix out;
    out.n_agents = n;
    out.k = k;
    out.values.assign(n * k, 0.0);

    std::vector<double> power = m;
    std::vector<double> next(n * n);
    std::vector<double> terms(n);
    for (std::size_t s = 0; s < k; ++s) {
        for (std::size_t i = 0; i < n; ++i) {
            out.values[i * k + s] = power[i * n + i];
        }
        if (s + 1 == k) {
            break;
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                terms.resize(n);
                for (std::size_t p = 0; p < n; ++p) {
                    terms[p] = power[i * n + p] * m[p * n + j];
                }
                next[i * n + j] = detail::sum_sorted(terms);
            }
        }
        power.swap(next);
    }
    return out;
}

}  // namespace astra
