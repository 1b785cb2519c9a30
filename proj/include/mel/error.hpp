#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mel {

// Bad configuration values, unknown families, malformed --gen specs.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (length mismatch, empty batch...).
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed input data; carries the 1-based line number when one applies.
struct ParseError : std::runtime_error {
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line(line) {}
    std::size_t line;
};

struct SerializationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Remote analyst could not be reached. Retriable.
struct TransportError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Remote analyst answered, but the answer did not have the mandatory sections.
struct AnalysisParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mel
