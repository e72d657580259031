// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "common/container.hpp"
#include "zoo/arch.hpp"

namespace sane::zoo {

Container checkpoint_to_container(const ModelCheckpoint& m);
ModelCheckpoint checkpoint_from_container(const Container& c);

void save_checkpoint(const ModelCheckpoint& m, const std::filesystem::path& dir);
ModelCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sane::zoo
