#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace upgd {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class NonFinite : public Error {
public:
    using Error::Error;
};

/// Raised by the utility propagation recursion when a divisor is too small.
class NearZeroDenominator : public Error {
public:
    NearZeroDenominator(std::size_t layer, std::size_t index, double value)
        : Error("near-zero denominator at layer " + std::to_string(layer) + ", unit " +
                std::to_string(index) + " (" + std::to_string(value) + ")"),
          layer_(layer),
          index_(index) {}

    [[nodiscard]] std::size_t layer() const noexcept { return layer_; }
    [[nodiscard]] std::size_t index() const noexcept { return index_; }

private:
    std::size_t layer_;
    std::size_t index_;
};

class ConstantInput : public Error {
public:
    using Error::Error;
};

class LengthMismatch : public Error {
public:
    using Error::Error;
};

// IDX loading errors.
class BadMagic : public Error {
public:
    using Error::Error;
};

class TruncatedFile : public Error {
public:
    using Error::Error;
};

class CountMismatch : public Error {
public:
    using Error::Error;
};

class DatasetNotLoaded : public Error {
public:
    using Error::Error;
};

/// A parameter update produced a non-finite value.
class Diverged : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace upgd
