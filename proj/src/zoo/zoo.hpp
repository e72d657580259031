// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zoo/arch.hpp"
#include "zoo/network.hpp"
#include "zoo/task.hpp"

namespace sane::zoo {

enum class Split { Train, Val, Test };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct ZooSpec {
    Architecture arch;
    TaskSpec task;
    std::size_t n_models = 64;
    std::size_t epochs = 25;
    std::vector<std::size_t> snapshot_epochs{1, 5, 10, 25};
    TrainOptions train;
    std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
    std::uint64_t seed = 1;

    void validate() const;
};

struct ZooEntry {
    std::int64_t model_id = 0;
    std::int64_t epoch = 0;
    std::string task;
    std::uint64_t seed = 0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double ggap = 0.0;  // train_acc - test_acc
    Split split = Split::Train;
    std::string path;  // checkpoint directory relative to the zoo root
};

struct ExcludedModel {
    std::int64_t model_id = 0;
    std::string reason;
};

/// One hidden-boundary permutation per learnable-layer boundary (outputs of
/// every learnable layer except the last).
using Permutations = std::vector<std::vector<std::size_t>>;

struct ZooManifest {
    Architecture arch;
    TaskSpec task;
    std::array<double, 3> split_ratios{0.7, 0.15, 0.15};
    std::vector<ZooEntry> entries;
    std::vector<ExcludedModel> excluded;
    std::optional<std::int64_t> reference_id;
    std::map<std::int64_t, Permutations> permutations;

    std::vector<std::int64_t> model_ids() const;
    std::vector<std::int64_t> model_ids(Split s) const;
    Split split_of(std::int64_t model_id) const;
    /// Entry indices of one model, in epoch order.
    std::vector<std::size_t> entries_of(std::int64_t model_id) const;
};

nlohmann::json manifest_to_json(const ZooManifest& m);
ZooManifest manifest_from_json(const nlohmann::json& j);

/// Checkpoints are kept parallel to manifest entries.
struct Zoo {
    ZooManifest manifest;
    std::vector<ModelCheckpoint> checkpoints;

    const ModelCheckpoint& checkpoint(std::size_t entry) const { return checkpoints.at(entry); }
};

/// Shuffles model ids with `seed` and cuts them by the ratios, so every epoch
/// of a model lands in the same split.
std::map<std::int64_t, Split> assign_splits(const std::vector<std::int64_t>& ids,
                                            const std::array<double, 3>& ratios,
                                            std::uint64_t seed);

/// Trains every base model and snapshots it at the requested epochs.
/// Models whose loss turns non-finite are excluded and listed in the manifest.
Zoo train_zoo(const ZooSpec& spec, std::size_t workers);

void save_zoo(const Zoo& zoo, const std::filesystem::path& dir);
Zoo load_zoo(const std::filesystem::path& dir);

}  // namespace sane::zoo
