#pragma once

#include <stdexcept>
#include <string>

namespace astra {

// Shape or dimension contract violation; messages report the offending shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent external data: tables, manifests, latent files.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration value or combination.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API contract violation (non-scalar backward root, negative KL, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// NaN/Inf or divergence detected during numeric work.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace astra
