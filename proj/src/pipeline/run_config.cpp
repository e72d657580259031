// SPDX-License-Identifier: Apache-2.0

#include "pipeline/run_config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "common/config_reader.hpp"
#include "common/rng.hpp"

namespace sane::pipeline {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& what) {
    fail(ErrorKind::Config, fmt::format("{}: {}", key, what), key);
}

template <typename T>
void get_optional(ConfigReader& r, const nlohmann::json& j, const std::string& key,
                  std::optional<T>& out) {
    if (r.has(key) && !j.at(key).is_null()) {
        T v{};
        r.get(key, v);
        out = v;
    }
}

zoo::Split split_from(const std::string& s, const std::string& key) {
    try {
        return zoo::parse_split(s);
    } catch (const Error&) {
        bad_value(key, fmt::format("unknown split '{}'", s));
    }
}

nlohmann::json null_or(const auto& opt) {
    return opt ? nlohmann::json(*opt) : nlohmann::json(nullptr);
}

}  // namespace

zoo::Architecture arch_config_from_json(const nlohmann::json& j, const std::string& path) {
    ConfigReader r(j, path);
    zoo::Architecture a;
    if (r.has("mlp")) {
        ConfigReader m(r.child("mlp"), path + ".mlp");
        std::size_t inputs = 2;
        std::vector<std::size_t> hidden{16, 16};
        std::size_t classes = 2;
        m.get("inputs", inputs);
        m.get("hidden", hidden);
        m.get("classes", classes);
        m.finish();
        a = zoo::make_mlp(inputs, hidden, classes);
    } else if (r.has("cnn")) {
        ConfigReader c(r.child("cnn"), path + ".cnn");
        zoo::CnnOptions o;
        c.get("in_channels", o.in_channels);
        c.get("height", o.height);
        c.get("width", o.width);
        c.get("channels", o.channels);
        c.get("kernel", o.kernel);
        c.get("stride", o.stride);
        c.get("padding", o.padding);
        c.get("batchnorm", o.batchnorm);
        c.get("classes", o.classes);
        c.finish();
        a = zoo::make_cnn(o);
    } else if (r.has("layers")) {
        r.has("input");
        try {
            a = zoo::arch_from_json(j);
        } catch (const Error& e) {
            bad_value(path, e.what());
        }
    } else {
        bad_value(path, "expected one of 'mlp', 'cnn' or 'layers'");
    }
    r.finish();
    try {
        a.validate();
    } catch (const Error& e) {
        bad_value(path, e.what());
    }
    return a;
}

zoo::TaskSpec task_config_from_json(const nlohmann::json& j, const std::string& path) {
    ConfigReader r(j, path);
    zoo::TaskSpec t;
    r.get("generator", t.generator);
    r.get("classes", t.classes);
    r.get("input_dim", t.input_dim);
    r.get("noise", t.noise);
    r.get("seed", t.seed);
    r.get("n_train", t.n_train);
    r.get("n_val", t.n_val);
    r.get("n_test", t.n_test);
    r.finish();
    try {
        t.validate();
    } catch (const Error& e) {
        bad_value(path, e.what());
    }
    return t;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    ConfigReader r(j, "");
    r.get("seed", c.seed);
    get_optional(r, j, "workers", c.workers);
    if (c.workers && *c.workers == 0) {
        bad_value("workers", "must be at least 1");
    }

    bool zoo_seed = false;
    if (r.has("zoo")) {
        const auto& zj = r.child("zoo");
        ConfigReader z(zj, "zoo");
        if (z.has("arch")) {
            c.zoo.arch = arch_config_from_json(z.child("arch"), "zoo.arch");
        }
        if (z.has("task")) {
            c.zoo.task = task_config_from_json(z.child("task"), "zoo.task");
        }
        z.get("n_models", c.zoo.n_models);
        z.get("epochs", c.zoo.epochs);
        z.get("snapshot_epochs", c.zoo.snapshot_epochs);
        z.get("split_ratios", c.zoo.split_ratios);
        zoo_seed = z.has("seed");
        z.get("seed", c.zoo.seed);
        if (z.has("train")) {
            ConfigReader t(z.child("train"), "zoo.train");
            t.get("lr", c.zoo.train.lr);
            t.get("weight_decay", c.zoo.train.weight_decay);
            t.get("batch_size", c.zoo.train.batch_size);
            t.finish();
        }
        z.finish();
    }
    if (c.zoo.arch.layers.empty()) {
        c.zoo.arch = zoo::make_mlp(2, {16, 16}, 2);
    }
    if (!zoo_seed) {
        c.zoo.seed = derive_seed(c.seed, 11);
    }
    try {
        c.zoo.validate();
    } catch (const Error& e) {
        bad_value("zoo", e.what());
    }

    if (r.has("align")) {
        const auto& aj = r.child("align");
        ConfigReader a(aj, "align");
        a.get("enabled", c.align.enabled);
        get_optional(a, aj, "reference_id", c.align.reference_id);
        a.get("max_sweeps", c.align.max_sweeps);
        a.finish();
    }

    if (r.has("sane")) {
        const auto& sj = r.child("sane");
        c.sane = model::config_from_json(sj, "sane");
        if (!sj.contains("seed")) {
            c.sane.seed = derive_seed(c.seed, 12);
        }
    } else {
        c.sane.seed = derive_seed(c.seed, 12);
    }

    if (r.has("embed")) {
        const auto& ej = r.child("embed");
        ConfigReader e(ej, "embed");
        get_optional(e, ej, "chunk", c.embed.chunk);
        get_optional(e, ej, "halo", c.embed.halo);
        e.finish();
        if (c.embed.chunk && *c.embed.chunk == 0) {
            bad_value("embed.chunk", "must be at least 1");
        }
    }

    if (r.has("probe")) {
        ConfigReader p(r.child("probe"), "probe");
        p.get("targets", c.probe.targets);
        p.finish();
        for (const auto& t : c.probe.targets) {
            if (t != "acc" && t != "epoch" && t != "ggap") {
                bad_value("probe.targets", fmt::format("unknown target '{}'", t));
            }
        }
    }

    if (r.has("analyze")) {
        ConfigReader a(r.child("analyze"), "analyze");
        a.get("plots", c.analyze.plots);
        a.finish();
    }

    if (r.has("prompts")) {
        const auto& pj = r.child("prompts");
        ConfigReader p(pj, "prompts");
        std::string split = "train";
        p.get("split", split);
        c.prompts.split = split_from(split, "prompts.split");
        get_optional(p, pj, "epoch", c.prompts.epoch);
        get_optional(p, pj, "count", c.prompts.count);
        if (p.has("target_arch") && !pj.at("target_arch").is_null()) {
            c.prompts.target_arch = arch_config_from_json(pj.at("target_arch"), "prompts.target_arch");
        }
        p.finish();
    }

    if (r.has("sample")) {
        const auto& sj = r.child("sample");
        c.sample = sample::sample_config_from_json(sj, "sample");
        if (!sj.contains("seed")) {
            c.sample.seed = derive_seed(c.seed, 13);
        }
    } else {
        c.sample.seed = derive_seed(c.seed, 13);
    }

    if (r.has("finetune")) {
        ConfigReader f(r.child("finetune"), "finetune");
        f.get("epochs", c.finetune.epochs);
        f.get("scratch_seeds", c.finetune.scratch_seeds);
        f.get("models", c.finetune.models);
        f.finish();
    }
    r.finish();
    return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["workers"] = null_or(c.workers);
    j["zoo"] = {{"arch", zoo::arch_to_json(c.zoo.arch)},
                {"task", zoo::task_to_json(c.zoo.task)},
                {"n_models", c.zoo.n_models},
                {"epochs", c.zoo.epochs},
                {"snapshot_epochs", c.zoo.snapshot_epochs},
                {"split_ratios", c.zoo.split_ratios},
                {"seed", c.zoo.seed},
                {"train",
                 {{"lr", c.zoo.train.lr},
                  {"weight_decay", c.zoo.train.weight_decay},
                  {"batch_size", c.zoo.train.batch_size}}}};
    j["align"] = {{"enabled", c.align.enabled},
                  {"reference_id", null_or(c.align.reference_id)},
                  {"max_sweeps", c.align.max_sweeps}};
    j["sane"] = model::config_to_json(c.sane);
    j["embed"] = {{"chunk", null_or(c.embed.chunk)}, {"halo", null_or(c.embed.halo)}};
    j["probe"] = {{"targets", c.probe.targets}};
    j["analyze"] = {{"plots", c.analyze.plots}};
    j["prompts"] = {{"split", zoo::split_name(c.prompts.split)},
                    {"epoch", null_or(c.prompts.epoch)},
                    {"count", null_or(c.prompts.count)}};
    j["prompts"]["target_arch"] =
        c.prompts.target_arch ? zoo::arch_to_json(*c.prompts.target_arch) : nlohmann::json(nullptr);
    j["sample"] = sample::sample_config_to_json(c.sample);
    j["finetune"] = {{"epochs", c.finetune.epochs},
                     {"scratch_seeds", c.finetune.scratch_seeds},
                     {"models", c.finetune.models}};
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::NotFound, fmt::format("config not found: {}", path.string()), path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Config, fmt::format("{}: {}", path.string(), e.what()));
    }
    return run_config_from_json(j);
}

}  // namespace sane::pipeline
