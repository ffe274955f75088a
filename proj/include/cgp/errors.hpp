#pragma once

#include <stdexcept>
#include <string>

namespace cgp {

// Shapes of operands are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Invalid configuration value or combination.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint missing or not matching the model architecture.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace cgp
