// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics/tensor.hpp"

namespace sane {

/// Directory container: `manifest.json` holds metadata and a tensor table
/// (name, shape, dtype, offset, nbytes, crc32); `tensors.bin` holds the raw
/// little-endian blobs concatenated in table order.
class Container {
public:
    struct Entry {
        std::string name;
        std::string dtype;  // "f32", "f64" or "i64"
        num::Shape shape;
        std::vector<unsigned char> bytes;
    };

    explicit Container(std::string kind = "generic") : kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }
    nlohmann::json& meta() { return meta_; }
    const nlohmann::json& meta() const { return meta_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void add(const std::string& name, const num::TensorF& t);
    void add(const std::string& name, const num::TensorD& t);
    void add_i64(const std::string& name, const num::Shape& shape,
                 const std::vector<std::int64_t>& values);

    bool contains(const std::string& name) const;
    num::TensorF get_f32(const std::string& name) const;
    num::TensorD get_f64(const std::string& name) const;
    std::vector<std::int64_t> get_i64(const std::string& name, num::Shape* shape = nullptr) const;

    void save(const std::filesystem::path& dir) const;
    /// Throws NotFound when the manifest is absent and Format on any
    /// inconsistency between manifest and blob (naming the offending tensor).
    static Container load(const std::filesystem::path& dir);

private:
    const Entry& find(const std::string& name, const char* dtype) const;

    std::string kind_;
    nlohmann::json meta_ = nlohmann::json::object();
    std::vector<Entry> entries_;
};

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n);

/// Writes text to a file, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace sane
