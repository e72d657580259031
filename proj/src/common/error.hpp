// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace sane {

enum class ErrorKind {
    Argument,
    Dimension,
    Config,
    Format,
    Capacity,
    Data,
    Io,
    Numeric,
    NotFound,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what, std::string key = {})
        : std::runtime_error(what), kind_(kind), key_(std::move(key)) {}

    ErrorKind kind() const noexcept { return kind_; }
    /// Offending config key path or tensor name, when one applies.
    const std::string& key() const noexcept { return key_; }

private:
    ErrorKind kind_;
    std::string key_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what, std::string key = {}) {
    throw Error(kind, what, std::move(key));
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) {
        throw Error(kind, what);
    }
}

const char* error_kind_name(ErrorKind kind) noexcept;

}  // namespace sane
