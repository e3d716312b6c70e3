#pragma once

#include <stdexcept>
#include <string>

namespace evsel {

// Invalid user-supplied configuration (bad ranges, unknown keys, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config: " + msg) {}
};

// Malformed on-disk data; message names the offending record where possible.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error("parse: " + msg) {}
};

// Violated call contract (shape mismatch, empty subset, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error("contract: " + msg) {}
};

// Unrecoverable failure during optimization (non-finite loss).
struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& msg) : std::runtime_error("train: " + msg) {}
};

}  // namespace evsel
