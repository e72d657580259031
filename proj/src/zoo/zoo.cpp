// SPDX-License-Identifier: Apache-2.0

#include "zoo/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "common/container.hpp"
#include "common/parallel.hpp"
#include "common/rng.hpp"
#include "zoo/checkpoint_io.hpp"

namespace sane::zoo {

const char* split_name(Split s) {
    switch (s) {
        case Split::Train:
            return "train";
        case Split::Val:
            return "val";
        case Split::Test:
            return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") {
        return Split::Train;
    }
    if (s == "val") {
        return Split::Val;
    }
    if (s == "test") {
        return Split::Test;
    }
    fail(ErrorKind::Format, fmt::format("unknown split '{}'", s));
}

void ZooSpec::validate() const {
    arch.validate();
    task.validate();
    if (arch.input_size() != num::shape_size(task.input_shape())) {
        fail(ErrorKind::Config, "architecture input does not match task input", "zoo.arch");
    }
    if (arch.num_classes() != task.classes) {
        fail(ErrorKind::Config, "architecture output does not match task classes", "zoo.arch");
    }
    if (n_models == 0) {
        fail(ErrorKind::Config, "n_models must be positive", "zoo.n_models");
    }
    if (snapshot_epochs.empty()) {
        fail(ErrorKind::Config, "snapshot_epochs must not be empty", "zoo.snapshot_epochs");
    }
    for (std::size_t e : snapshot_epochs) {
        if (e > epochs) {
            fail(ErrorKind::Config, "snapshot epoch beyond training epochs", "zoo.snapshot_epochs");
        }
    }
    const double total = split_ratios[0] + split_ratios[1] + split_ratios[2];
    if (std::abs(total - 1.0) > 1e-9 || split_ratios[0] <= 0.0 ||
        std::any_of(split_ratios.begin(), split_ratios.end(), [](double r) { return r < 0.0; })) {
        fail(ErrorKind::Config, "split ratios must be non-negative and sum to 1", "zoo.split");
    }
}

std::vector<std::int64_t> ZooManifest::model_ids() const {
    std::set<std::int64_t> ids;
    for (const auto& e : entries) {
        ids.insert(e.model_id);
    }
    return {ids.begin(), ids.end()};
}

std::vector<std::int64_t> ZooManifest::model_ids(Split s) const {
    std::set<std::int64_t> ids;
    for (const auto& e : entries) {
        if (e.split == s) {
            ids.insert(e.model_id);
        }
    }
    return {ids.begin(), ids.end()};
}

Split ZooManifest::split_of(std::int64_t model_id) const {
    for (const auto& e : entries) {
        if (e.model_id == model_id) {
            return e.split;
        }
    }
    fail(ErrorKind::Data, fmt::format("model {} not in zoo", model_id));
}

std::vector<std::size_t> ZooManifest::entries_of(std::int64_t model_id) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].model_id == model_id) {
            idx.push_back(i);
        }
    }
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return entries[a].epoch < entries[b].epoch; });
    return idx;
}

nlohmann::json manifest_to_json(const ZooManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"model_id", e.model_id},
                           {"epoch", e.epoch},
                           {"task", e.task},
                           {"seed", e.seed},
                           {"train_acc", e.train_acc},
                           {"test_acc", e.test_acc},
                           {"ggap", e.ggap},
                           {"split", split_name(e.split)},
                           {"path", e.path}});
    }
    nlohmann::json excluded = nlohmann::json::array();
    for (const auto& x : m.excluded) {
        excluded.push_back({{"model_id", x.model_id}, {"reason", x.reason}});
    }
    nlohmann::json perms = nlohmann::json::object();
    for (const auto& [id, p] : m.permutations) {
        perms[std::to_string(id)] = p;
    }
    nlohmann::json j{{"format", "sane-zoo"},
                     {"version", 1},
                     {"arch", arch_to_json(m.arch)},
                     {"task", task_to_json(m.task)},
                     {"split_ratios", m.split_ratios},
                     {"entries", entries},
                     {"excluded", excluded},
                     {"permutations", perms}};
    j["reference_id"] = m.reference_id ? nlohmann::json(*m.reference_id) : nlohmann::json();
    return j;
}

ZooManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "sane-zoo") {
            fail(ErrorKind::Format, "zoo.json is not a sane-zoo manifest");
        }
        ZooManifest m;
        m.arch = arch_from_json(j.at("arch"));
        m.task = task_from_json(j.at("task"));
        m.split_ratios = j.at("split_ratios").get<std::array<double, 3>>();
        for (const auto& ej : j.at("entries")) {
            ZooEntry e;
            e.model_id = ej.at("model_id").get<std::int64_t>();
            e.epoch = ej.at("epoch").get<std::int64_t>();
            e.task = ej.at("task").get<std::string>();
            e.seed = ej.at("seed").get<std::uint64_t>();
            e.train_acc = ej.at("train_acc").get<double>();
            e.test_acc = ej.at("test_acc").get<double>();
            e.ggap = ej.at("ggap").get<double>();
            e.split = parse_split(ej.at("split").get<std::string>());
            e.path = ej.at("path").get<std::string>();
            m.entries.push_back(std::move(e));
        }
        for (const auto& xj : j.value("excluded", nlohmann::json::array())) {
            m.excluded.push_back({xj.at("model_id").get<std::int64_t>(),
                                  xj.at("reason").get<std::string>()});
        }
        const auto perms = j.value("permutations", nlohmann::json::object());
        for (const auto& [key, pj] : perms.items()) {
            m.permutations[std::stoll(key)] = pj.get<Permutations>();
        }
        if (j.contains("reference_id") && !j.at("reference_id").is_null()) {
            m.reference_id = j.at("reference_id").get<std::int64_t>();
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("malformed zoo manifest: {}", e.what()));
    }
}

std::map<std::int64_t, Split> assign_splits(const std::vector<std::int64_t>& ids,
                                            const std::array<double, 3>& ratios,
                                            std::uint64_t seed) {
    for (double r : ratios) {
        require(r >= 0.0, ErrorKind::Config, "split ratios must be non-negative");
    }
    require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) < 1e-9, ErrorKind::Config,
            "split ratios must sum to 1");
    std::vector<std::int64_t> order = ids;
    std::sort(order.begin(), order.end());
    Rng rng(derive_seed(seed, 0x5B1));
    rng.shuffle(order);
    const auto n = static_cast<double>(order.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
    const auto n_val = std::min(order.size() - n_train,
                                static_cast<std::size_t>(std::llround(ratios[1] * n)));
    std::map<std::int64_t, Split> out;
    for (std::size_t i = 0; i < order.size(); ++i) {
        out[order[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    }
    return out;
}

namespace {

struct ModelRun {
    std::vector<ModelCheckpoint> snapshots;
    std::vector<ZooEntry> entries;
    std::string failure;
};

std::string checkpoint_dir_name(std::int64_t id, std::int64_t epoch) {
    return fmt::format("models/m{:04d}_e{:03d}", id, epoch);
}

}  // namespace

Zoo train_zoo(const ZooSpec& spec, std::size_t workers) {
    spec.validate();
    const TaskData data = generate_splits(spec.task);
    std::vector<std::size_t> snaps = spec.snapshot_epochs;
    std::sort(snaps.begin(), snaps.end());
    snaps.erase(std::unique(snaps.begin(), snaps.end()), snaps.end());

    std::vector<ModelRun> runs(spec.n_models);
    parallel_for(spec.n_models, workers, [&](std::size_t i) {
        const auto id = static_cast<std::int64_t>(i);
        const std::uint64_t seed = derive_seed(spec.seed, i);
        ModelCheckpoint init = init_checkpoint(spec.arch, seed);
        Trainer trainer(std::move(init), spec.train, seed);
        auto record = [&](std::size_t epoch) {
            ModelCheckpoint snap = trainer.snapshot();
            snap.meta.model_id = id;
            snap.meta.seed = seed;
            snap.meta.epoch = static_cast<std::int64_t>(epoch);
            ZooEntry e;
            e.model_id = id;
            e.epoch = static_cast<std::int64_t>(epoch);
            e.task = spec.task.id();
            e.seed = seed;
            e.train_acc = evaluate(snap, data.train).accuracy;
            e.test_acc = evaluate(snap, data.test).accuracy;
            e.ggap = e.train_acc - e.test_acc;
            e.path = checkpoint_dir_name(id, e.epoch);
            runs[i].entries.push_back(std::move(e));
            runs[i].snapshots.push_back(std::move(snap));
        };
        std::size_t next = 0;
        if (next < snaps.size() && snaps[next] == 0) {
            record(0);
            ++next;
        }
        for (std::size_t epoch = 1; epoch <= spec.epochs && next < snaps.size(); ++epoch) {
            trainer.run_epoch(data.train);
            if (trainer.diverged()) {
                runs[i].failure = fmt::format("non-finite training loss in epoch {}", epoch);
                return;
            }
            if (snaps[next] == epoch) {
                record(epoch);
                ++next;
            }
        }
    });

    Zoo zoo;
    zoo.manifest.arch = spec.arch;
    zoo.manifest.task = spec.task;
    zoo.manifest.split_ratios = spec.split_ratios;
    std::vector<std::int64_t> kept;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i].failure.empty()) {
            kept.push_back(static_cast<std::int64_t>(i));
        } else {
            zoo.manifest.excluded.push_back({static_cast<std::int64_t>(i), runs[i].failure});
        }
    }
    const auto splits = assign_splits(kept, spec.split_ratios, spec.seed);
    for (std::int64_t id : kept) {
        auto& run = runs[static_cast<std::size_t>(id)];
        for (std::size_t k = 0; k < run.entries.size(); ++k) {
            run.entries[k].split = splits.at(id);
            zoo.manifest.entries.push_back(std::move(run.entries[k]));
            zoo.checkpoints.push_back(std::move(run.snapshots[k]));
        }
    }
    return zoo;
}

void save_zoo(const Zoo& zoo, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < zoo.manifest.entries.size(); ++i) {
        save_checkpoint(zoo.checkpoints.at(i), dir / zoo.manifest.entries[i].path);
    }
    write_text(dir / "zoo.json", manifest_to_json(zoo.manifest).dump(1) + "\n");
}

Zoo load_zoo(const std::filesystem::path& dir) {
    const auto path = dir / "zoo.json";
    if (!std::filesystem::exists(path)) {
        fail(ErrorKind::NotFound, fmt::format("no zoo.json in {}", dir.string()), dir.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("{}: {}", path.string(), e.what()));
    }
    Zoo zoo;
    zoo.manifest = manifest_from_json(j);
    for (const auto& e : zoo.manifest.entries) {
        ModelCheckpoint m = load_checkpoint(dir / e.path);
        if (!(m.arch == zoo.manifest.arch)) {
            fail(ErrorKind::Format, fmt::format("{}: architecture differs from zoo", e.path), e.path);
        }
        zoo.checkpoints.push_back(std::move(m));
    }
    return zoo;
}

}  // namespace sane::zoo
