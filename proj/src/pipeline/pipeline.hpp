// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "pipeline/run_config.hpp"

namespace sane::pipeline {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

struct Stage {
    const RunConfig& cfg;
    std::size_t workers = 1;
    Logger log;
};

/// Every stage writes into a fresh directory: resolved_config.json, its
/// artifacts, and a <stage>_report.json carrying input content hashes.
/// Missing inputs raise NotFound; a non-empty output directory raises Io.
nlohmann::json run_zoo_gen(const Stage& s, const fs::path& out);
nlohmann::json run_align(const Stage& s, const fs::path& zoo_dir, const fs::path& out);
nlohmann::json run_pretrain(const Stage& s, const fs::path& zoo_dir, const fs::path& out);
nlohmann::json run_embed(const Stage& s, const fs::path& pretrain_dir, const fs::path& zoo_dir,
                         const fs::path& out);
nlohmann::json run_probe(const Stage& s, const fs::path& zoo_dir, const fs::path& embed_dir,
                         const fs::path& out);
/// `embed_dir` may be empty; embedding features are skipped then.
nlohmann::json run_analyze(const Stage& s, const fs::path& zoo_dir, const fs::path& embed_dir,
                           const fs::path& out);
nlohmann::json run_sample(const Stage& s, const fs::path& pretrain_dir, const fs::path& zoo_dir,
                          const fs::path& embed_dir, const fs::path& out);
nlohmann::json run_finetune(const Stage& s, const fs::path& sample_dir, const fs::path& zoo_dir,
                            const fs::path& out);
/// Collects the stage reports found in `runs` into one summary.
nlohmann::json run_report(const Stage& s, const std::vector<fs::path>& runs, const fs::path& out);

/// Directory holding cached zoos, from SANE_CACHE_DIR. Empty when unset.
fs::path cache_dir();

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace sane::pipeline
