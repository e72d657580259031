// SPDX-License-Identifier: Apache-2.0

#include "common/hash.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <vector>

#include <fmt/format.h>
#include <openssl/sha.h>

#include "common/error.hpp"

namespace sane {

namespace fs = std::filesystem;

std::string sha1_hex(std::string_view data) {
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
    std::string out;
    for (unsigned char c : digest) {
        out += fmt::format("{:02x}", c);
    }
    return out;
}

std::string git_blob_id(std::string_view content) {
    std::string buf = fmt::format("blob {}", content.size());
    buf.push_back('\0');
    buf.append(content);
    return sha1_hex(buf);
}

namespace {

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, fmt::format("cannot read {}", p.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

std::string content_hash(const fs::path& path) {
    if (!fs::exists(path)) {
        fail(ErrorKind::NotFound, fmt::format("input not found: {}", path.string()), path.string());
    }
    if (!fs::is_directory(path)) {
        return git_blob_id(read_all(path));
    }
    std::vector<std::string> lines;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (e.is_regular_file()) {
            lines.push_back(fmt::format("{} {}", fs::relative(e.path(), path).generic_string(),
                                        git_blob_id(read_all(e.path()))));
        }
    }
    std::sort(lines.begin(), lines.end());
    std::string listing;
    for (const auto& l : lines) {
        listing += l;
        listing += '\n';
    }
    return git_blob_id(listing);
}

}  // namespace sane
