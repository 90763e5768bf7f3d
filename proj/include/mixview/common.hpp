#pragma once

#include <cstdlib>
#include <malloc.h>
#include <stdexcept>
#include <string>

namespace mixview {

inline constexpr const char* kVersion = "0.1.0";

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

/// Argument outside its documented range.
struct ParameterError : Error {
    using Error::Error;
};

/// API precondition violated (caller bug, not bad data).
struct ContractError : Error {
    using Error::Error;
};

/// Input is mathematically degenerate (zero vector, zero column).
struct DegenerateInputError : Error {
    using Error::Error;
};

/// Numerical failure (non-finite value, indefinite matrix).
struct NumericError : Error {
    using Error::Error;
};

/// Malformed file or serialized payload.
struct FormatError : Error {
    using Error::Error;
};

/// Invalid experiment configuration. Message starts with the field path.
struct ConfigError : Error {
    using Error::Error;
};

/// Filesystem failure.
struct IoError : Error {
    using Error::Error;
};

/// Keeps multi-megabyte tensor buffers on the heap instead of per-allocation
/// mmap, which avoids refaulting pages on every training step. Idempotent.
inline void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

/// When on, every tensor op validates its output for NaN/Inf. Defaults to the
/// MIXVIEW_CHECKED=1 environment variable; tests turn it on explicitly.
inline bool& checked_mode() {
    static bool flag = [] {
        const char* env = std::getenv("MIXVIEW_CHECKED");
        return env != nullptr && std::string(env) == "1";
    }();
    return flag;
}

}  // namespace mixview
