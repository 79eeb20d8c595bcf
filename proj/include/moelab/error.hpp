#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shape mismatch or an empty tensor where data is required.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A function argument violates its documented precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Inconsistent or unparsable configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// The threshold controller received an unusable observation.
class ControllerError : public Error {
public:
    using Error::Error;
};

/// Non-finite values appeared during training.
class NumericError : public Error {
public:
    using Error::Error;
};

/// File system failure; the message names the path.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace moelab
