#pragma once

#include <stdexcept>
#include <string>

namespace relvit {

// Error categories. The CLI maps these onto stable exit codes.

/// Violated precondition on an operation's inputs.
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite value encountered during a numeric computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unknown configuration key/value.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dataset, split or annotation inconsistency.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint/snapshot payload that cannot be decoded.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Semantics string that does not parse.
class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t position)
        : DataError(what + " at position " + std::to_string(position)), position_(position) {}

    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

} // namespace relvit
