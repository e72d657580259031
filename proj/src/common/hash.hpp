// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace sane {

std::string sha1_hex(std::string_view data);

/// Git blob id: sha1("blob <size>\0" + content).
std::string git_blob_id(std::string_view content);

/// Hash of a file, or of a directory as the sorted list of
/// "<relative path> <blob id>" lines. NotFound error when the path is missing.
std::string content_hash(const std::filesystem::path& path);

}  // namespace sane
