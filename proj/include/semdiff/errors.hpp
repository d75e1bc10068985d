#pragma once

#include <stdexcept>
#include <string>

namespace semdiff {

// Invalid scalar argument or configuration bound.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of a function.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input data: labels out of range, bad manifests, unreadable images.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SamplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace semdiff
