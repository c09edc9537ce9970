#pragma once

#include <stdexcept>
#include <string>

namespace latentad {

// Error categories map 1:1 onto CLI exit codes (see tools/latentad_main.cpp):
// ConfigError -> 2, InputError -> 3, NumericError -> 4.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric that is undefined for the given labels (e.g. single-class AUROC).
struct MetricUndefinedError : NumericError {
    explicit MetricUndefinedError(const std::string& msg) : NumericError(msg) {}
};

// Sprite placement that failed after bounded retries.
struct PlacementError : InputError {
    explicit PlacementError(const std::string& msg) : InputError(msg) {}
};

} // namespace latentad
