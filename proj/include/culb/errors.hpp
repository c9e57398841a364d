#pragma once

#include <stdexcept>
#include <string>

namespace culb {

// Bad input: config contradictions, violated preconditions, shape mismatches.
// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure while running: non-finite values, unmet training gates, broken files.
// The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace culb
