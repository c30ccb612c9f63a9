#pragma once

#include <stdexcept>
#include <string>

namespace pte {

// Caller broke a documented precondition (shape mismatch, empty input, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Invalid or inconsistent run configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A sequence outgrew max_positions.
class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Replay of a recorded trajectory diverged from its descriptor.
class ReplayError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace pte
