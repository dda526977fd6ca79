#pragma once

#include <stdexcept>
#include <string>

namespace petah {

// Shape or binding mismatch between tensors/operations.
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values or otherwise invalid numeric state detected at an op boundary.
class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// A property or consistency check failed (CLI exit code 2).
class VerificationError : public std::runtime_error {
public:
    explicit VerificationError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O failure, corruption, checksum or format mismatch (CLI exit code 3).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace petah
