#pragma once

#include <stdexcept>
#include <string>

namespace crowdnet {

/// Bad arguments or a violated precondition (shape mismatch, bad config value).
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or missing input data (files, annotations, checkpoints).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A non-finite value showed up in a computation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace crowdnet
