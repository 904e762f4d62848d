// Error taxonomy shared by all mcam modules.
#pragma once

#include <stdexcept>
#include <string>

namespace mcam {

// Tensor shape disagreement (reports both shapes in the message).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (bad groups, odd grid, band above Nyquist, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API contract violation (non-scalar loss, stochastic forward in grad_check, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Degenerate data (all-zero baseline channel, all-zero filter, zero-variance sample).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range or malformed input values.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// I/O failure or malformed file.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mcam
