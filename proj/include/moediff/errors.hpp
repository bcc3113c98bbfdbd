#pragma once

#include <stdexcept>
#include <string>

namespace moediff {

// Error taxonomy for the engine. Each failure mode named by the module
// contracts gets its own type so callers and tests can catch precisely.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ScriptUnderrunError : std::runtime_error {
    explicit ScriptUnderrunError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CacheInconsistencyError : std::runtime_error {
    explicit CacheInconsistencyError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CoverageError : std::runtime_error {
    explicit CoverageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StallError : std::runtime_error {
    explicit StallError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InstrumentationError : std::runtime_error {
    explicit InstrumentationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct VerificationInputError : std::runtime_error {
    explicit VerificationInputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ComparisonError : std::runtime_error {
    explicit ComparisonError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace moediff
