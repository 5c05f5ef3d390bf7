#pragma once

#include <stdexcept>
#include <string>

namespace qmap {

/// Malformed input or bad arguments. The CLI maps this to exit code 2.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss, divergence, or a failed numerical routine (exit code 3).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// File format problems (NIfTI, CSV, checkpoints).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace qmap
