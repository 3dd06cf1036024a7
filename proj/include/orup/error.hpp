#pragma once

#include <stdexcept>
#include <string>

namespace orup {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension-index mismatch.
struct DimensionError : Error {
    using Error::Error;
};

// Caller violated an operation precondition (non-scalar loss, bad epsilon, ...).
struct ContractError : Error {
    using Error::Error;
};

// A NaN or Inf was produced or supplied.
struct NonFiniteError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct ConsistencyError : Error {
    using Error::Error;
};

struct DegenerateInputError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Input too close to the origin for a stable projection.
struct IllConditionedError : Error {
    using Error::Error;
};

}  // namespace orup
