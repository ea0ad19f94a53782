#pragma once

#include <stdexcept>
#include <string>

namespace libra {

/// A caller broke an operation's precondition (shape mismatch, id out of range).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Bad user-provided input: malformed files, empty datasets, non-divisible images.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A configuration value conflicts with stored state (e.g. checkpoint width).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN or Inf escaped a forward computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace libra
