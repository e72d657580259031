// SPDX-License-Identifier: Apache-2.0

#include "common/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

namespace sane {

static_assert(std::endian::native == std::endian::little,
              "container blobs are little-endian; big-endian hosts are unsupported");

namespace {

constexpr const char* kFormat = "sane-container";
constexpr int kVersion = 1;

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") {
        return 4;
    }
    if (dtype == "f64" || dtype == "i64") {
        return 8;
    }
    fail(ErrorKind::Format, fmt::format("unknown dtype '{}'", dtype));
}

template <typename T>
std::vector<unsigned char> to_bytes(const T* data, std::size_t n) {
    std::vector<unsigned char> out(n * sizeof(T));
    if (n > 0) {
        std::memcpy(out.data(), data, out.size());
    }
    return out;
}

}  // namespace

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < n) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - done, 1U << 30));
        crc = crc32(crc, data + done, chunk);
        done += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        fail(ErrorKind::Io, fmt::format("cannot write {}", path.string()));
    }
    f << text;
    if (!f) {
        fail(ErrorKind::Io, fmt::format("write failed for {}", path.string()));
    }
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        fail(ErrorKind::NotFound, fmt::format("cannot open {}", path.string()), path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void Container::add(const std::string& name, const num::TensorF& t) {
    entries_.push_back({name, "f32", t.shape(), to_bytes(t.data(), t.size())});
}

void Container::add(const std::string& name, const num::TensorD& t) {
    entries_.push_back({name, "f64", t.shape(), to_bytes(t.data(), t.size())});
}

void Container::add_i64(const std::string& name, const num::Shape& shape,
                        const std::vector<std::int64_t>& values) {
    if (num::shape_size(shape) != values.size()) {
        fail(ErrorKind::Dimension, fmt::format("tensor '{}': shape does not match data", name));
    }
    entries_.push_back({name, "i64", shape, to_bytes(values.data(), values.size())});
}

bool Container::contains(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) {
            return true;
        }
    }
    return false;
}

const Container::Entry& Container::find(const std::string& name, const char* dtype) const {
    for (const auto& e : entries_) {
        if (e.name == name) {
            if (e.dtype != dtype) {
                fail(ErrorKind::Format,
                     fmt::format("tensor '{}' has dtype {}, expected {}", name, e.dtype, dtype),
                     name);
            }
            return e;
        }
    }
    fail(ErrorKind::Format, fmt::format("tensor '{}' missing from container", name), name);
}

num::TensorF Container::get_f32(const std::string& name) const {
    const Entry& e = find(name, "f32");
    std::vector<float> v(num::shape_size(e.shape));
    std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    return num::TensorF(e.shape, std::move(v));
}

num::TensorD Container::get_f64(const std::string& name) const {
    const Entry& e = find(name, "f64");
    std::vector<double> v(num::shape_size(e.shape));
    std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    return num::TensorD(e.shape, std::move(v));
}

std::vector<std::int64_t> Container::get_i64(const std::string& name, num::Shape* shape) const {
    const Entry& e = find(name, "i64");
    std::vector<std::int64_t> v(num::shape_size(e.shape));
    std::memcpy(v.data(), e.bytes.data(), e.bytes.size());
    if (shape) {
        *shape = e.shape;
    }
    return v;
}

void Container::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    std::ofstream blob(dir / "tensors.bin", std::ios::binary);
    if (!blob) {
        fail(ErrorKind::Io, fmt::format("cannot write {}", (dir / "tensors.bin").string()));
    }
    for (const auto& e : entries_) {
        table.push_back({{"name", e.name},
                         {"shape", e.shape},
                         {"dtype", e.dtype},
                         {"offset", offset},
                         {"nbytes", e.bytes.size()},
                         {"crc32", crc32_bytes(e.bytes.data(), e.bytes.size())}});
        blob.write(reinterpret_cast<const char*>(e.bytes.data()),
                   static_cast<std::streamsize>(e.bytes.size()));
        offset += e.bytes.size();
    }
    blob.close();
    if (!blob) {
        fail(ErrorKind::Io, fmt::format("write failed for {}", (dir / "tensors.bin").string()));
    }
    nlohmann::json manifest{{"format", kFormat},
                            {"version", kVersion},
                            {"kind", kind_},
                            {"meta", meta_},
                            {"tensors", table}};
    write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

Container Container::load(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        fail(ErrorKind::NotFound, fmt::format("no manifest.json in {}", dir.string()),
             dir.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("{}: {}", manifest_path.string(), e.what()));
    }
    try {
        if (manifest.at("format") != kFormat || manifest.at("version") != kVersion) {
            fail(ErrorKind::Format, fmt::format("{}: not a version-{} {} manifest",
                                                manifest_path.string(), kVersion, kFormat));
        }
        Container c(manifest.at("kind").get<std::string>());
        c.meta_ = manifest.value("meta", nlohmann::json::object());

        const auto blob_path = dir / "tensors.bin";
        std::ifstream blob(blob_path, std::ios::binary);
        if (!blob) {
            fail(ErrorKind::Format,
                 fmt::format("manifest references missing blob {}", blob_path.string()));
        }
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(blob)),
                                        std::istreambuf_iterator<char>());
        std::uint64_t expected_offset = 0;
        for (const auto& tj : manifest.at("tensors")) {
            Entry e;
            e.name = tj.at("name").get<std::string>();
            e.dtype = tj.at("dtype").get<std::string>();
            e.shape = tj.at("shape").get<num::Shape>();
            const auto offset = tj.at("offset").get<std::uint64_t>();
            const auto nbytes = tj.at("nbytes").get<std::uint64_t>();
            const auto crc = tj.at("crc32").get<std::uint32_t>();
            if (offset != expected_offset ||
                nbytes != num::shape_size(e.shape) * dtype_size(e.dtype)) {
                fail(ErrorKind::Format,
                     fmt::format("tensor '{}': table entry inconsistent with its shape", e.name),
                     e.name);
            }
            if (offset + nbytes > data.size()) {
                fail(ErrorKind::Format, fmt::format("tensor '{}': blob truncated", e.name), e.name);
            }
            e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(offset),
                           data.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
            if (crc32_bytes(e.bytes.data(), e.bytes.size()) != crc) {
                fail(ErrorKind::Format, fmt::format("tensor '{}': checksum mismatch", e.name),
                     e.name);
            }
            expected_offset += nbytes;
            c.entries_.push_back(std::move(e));
        }
        if (expected_offset != data.size()) {
            fail(ErrorKind::Format,
                 fmt::format("{}: blob has {} trailing bytes", blob_path.string(),
                             data.size() - expected_offset));
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("{}: {}", manifest_path.string(), e.what()));
    }
}

const char* error_kind_name(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Argument:
            return "argument";
        case ErrorKind::Dimension:
            return "dimension";
        case ErrorKind::Config:
            return "config";
        case ErrorKind::Format:
            return "format";
        case ErrorKind::Capacity:
            return "capacity";
        case ErrorKind::Data:
            return "data";
        case ErrorKind::Io:
            return "io";
        case ErrorKind::Numeric:
            return "numeric";
        case ErrorKind::NotFound:
            return "not_found";
    }
    return "unknown";
}

}  // namespace sane
