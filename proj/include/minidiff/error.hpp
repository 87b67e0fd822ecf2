#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace minidiff {

enum class ErrorKind {
    invalid_argument,
    numeric_degenerate,
    unknown_token,
    unknown_layer,
    invalid_state,
    insufficient_samples,
    invalid_dataset,
    insufficient_generated,
    dependency_missing,
    config_error,
    incompatible_checkpoint,
    io_error,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::numeric_degenerate: return "numeric-degenerate";
        case ErrorKind::unknown_token: return "unknown-token";
        case ErrorKind::unknown_layer: return "unknown-layer";
        case ErrorKind::invalid_state: return "invalid-state";
        case ErrorKind::insufficient_samples: return "insufficient-samples";
        case ErrorKind::invalid_dataset: return "invalid-dataset";
        case ErrorKind::insufficient_generated: return "insufficient-generated";
        case ErrorKind::dependency_missing: return "dependency-missing";
        case ErrorKind::config_error: return "config-error";
        case ErrorKind::incompatible_checkpoint: return "incompatible-checkpoint";
        case ErrorKind::io_error: return "io-error";
    }
    return "unknown";
}

/// Every failure raised by the library carries one of the kinds above so callers
/// (and the CLI exit-code mapping) can branch on it without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) throw Error(kind, message);
}

}  // namespace minidiff
