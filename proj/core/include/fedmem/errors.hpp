#ifndef FEDMEM_ERRORS_HPP
#define FEDMEM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace fedmem {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid construction parameters: dimension mismatches, bad grids,
/// malformed experiment configs, degenerate clients.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Invalid runtime input to an otherwise well-configured component
/// (wrong feature length, empty batch, off-simplex probability vector).
class InputError : public Error {
public:
    using Error::Error;
};

/// Corrupt or unsupported serialized data (bad magic, version, truncation).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Query against an empty datastore. Callers that hold a global model
/// fall back to it instead of propagating this.
class EmptyStoreError : public InputError {
public:
    using InputError::InputError;
};

} // namespace fedmem

#endif
