// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>

#include <fmt/format.h>
#include <json.hpp>

#include "common/error.hpp"

namespace sane {

/// Reads optional fields from one JSON object and rejects keys nobody asked
/// for. Errors carry the dotted key path.
class ConfigReader {
public:
    ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            fail(ErrorKind::Config, fmt::format("{}: expected an object", path_), path_);
        }
    }

    std::string key_path(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::Config, fmt::format("{}: invalid value", key_path(key)), key_path(key));
        }
    }

    const nlohmann::json& child(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                fail(ErrorKind::Config, fmt::format("{}: unknown key", key_path(it.key())),
                     key_path(it.key()));
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace sane
