#pragma once

#include <stdexcept>
#include <string>

namespace dipcg {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Unknown generator or other lookup miss.
struct NotFound : Error {
    using Error::Error;
};

/// A parameter vector violates its schema. `param()` names the offending entry.
struct InvalidParam : Error {
    InvalidParam(std::string name, const std::string& what)
        : Error(what), name_(std::move(name)) {}
    const std::string& param() const noexcept { return name_; }

private:
    std::string name_;
};

struct InvalidInput : Error {
    using Error::Error;
};

/// Malformed on-disk data (bad magic, truncated payload, invalid shape).
struct FormatError : Error {
    using Error::Error;
};

} // namespace dipcg
