// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "model/sane_model.hpp"
#include "sample/sample.hpp"
#include "zoo/zoo.hpp"

namespace sane::pipeline {

struct AlignSection {
    bool enabled = true;
    std::optional<std::int64_t> reference_id;  // default: lowest train id
    std::size_t max_sweeps = 50;
};

struct EmbedSection {
    std::optional<std::size_t> chunk;  // default: SANE window
    std::optional<std::size_t> halo;   // default: window / 4
};

struct ProbeSection {
    std::vector<std::string> targets{"acc", "epoch", "ggap"};
};

struct AnalyzeSection {
    bool plots = true;
};

struct PromptSection {
    zoo::Split split = zoo::Split::Train;
    std::optional<std::int64_t> epoch;  // default: last snapshot
    std::optional<std::size_t> count;   // default: every matching model
    std::optional<zoo::Architecture> target_arch;  // default: the zoo architecture
};

struct FinetuneSection {
    std::size_t epochs = 1;
    std::size_t scratch_seeds = 5;
    std::size_t models = 0;  // 0: every sampled model
};

/// Whole-pipeline settings. Module seeds left out of the document are
/// derived from the global seed.
struct RunConfig {
    std::uint64_t seed = 1;
    std::optional<std::size_t> workers;
    zoo::ZooSpec zoo;
    AlignSection align;
    model::SaneConfig sane;
    EmbedSection embed;
    ProbeSection probe;
    AnalyzeSection analyze;
    PromptSection prompts;
    sample::SampleConfig sample;
    FinetuneSection finetune;
};

/// Rejects unknown keys with a Config error naming the dotted key path.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

zoo::Architecture arch_config_from_json(const nlohmann::json& j, const std::string& path);
zoo::TaskSpec task_config_from_json(const nlohmann::json& j, const std::string& path);

}  // namespace sane::pipeline
