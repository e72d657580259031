// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sane/sane.h"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissingInput = 3;

struct Options {
    std::string config;
    std::string out;
    std::size_t workers = 0;
    std::string zoo;
    std::string model;
    std::string embeddings;
    std::string samples;
    std::vector<std::string> runs;
    bool plots = false;
    bool no_plots = false;
    bool quiet = false;
};

void print_error(const std::string& kind, const std::string& message, const std::string& key = {}) {
    nlohmann::json j{{"error", kind}, {"message", message}};
    if (!key.empty()) {
        j["key"] = key;
    }
    std::fputs((j.dump() + "\n").c_str(), stderr);
}

int exit_code(sane_status st) {
    switch (st) {
        case SANE_OK: return 0;
        case SANE_E_CONFIG: return kExitUsage;
        case SANE_E_NOT_FOUND: return kExitMissingInput;
        default: return kExitFailure;
    }
}

int report_failure(sane_status st) {
    print_error(sane_status_name(st), sane_last_error(), sane_last_error_key());
    return exit_code(st);
}

void log_line(const char* msg, void*) {
    std::fprintf(stderr, "%s\n", msg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weight-space hyper-representations: zoo generation, pretraining, embedding, "
                 "probing, analysis and model sampling."};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(sane_version()));

    Options o;
    auto common = [&](CLI::App* sub, bool needs_config = true) {
        auto* c = sub->add_option("--config", o.config, "Run configuration (JSON, comments allowed)")
                      ->check(CLI::ExistingFile);
        if (needs_config) {
            c->required();
        }
        sub->add_option("--out", o.out, "Fresh output directory")->required();
        sub->add_option("--workers", o.workers, "Worker threads (default: config, else all cores)")
            ->check(CLI::PositiveNumber);
        sub->add_flag("--quiet", o.quiet, "Suppress progress messages");
    };
    auto input = [&](CLI::App* sub, const char* name, std::string& dst, const char* help, bool required = true) {
        auto* opt = sub->add_option(name, dst, help);
        if (required) {
            opt->required();
        }
    };
    auto plot_flags = [&](CLI::App* sub) {
        auto* on = sub->add_flag("--plots", o.plots, "Write SVG plots");
        auto* off = sub->add_flag("--no-plots", o.no_plots, "Skip SVG plots");
        on->excludes(off);
    };

    auto* zoo_gen = app.add_subcommand("zoo-gen", "Train a population of base models");
    common(zoo_gen);
    auto* align = app.add_subcommand("align", "Align every zoo model to a reference model");
    common(align);
    input(align, "--zoo", o.zoo, "zoo-gen output directory");
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain the sequential autoencoder on a zoo");
    common(pretrain);
    input(pretrain, "--zoo", o.zoo, "zoo-gen or align output directory");
    auto* embed = app.add_subcommand("embed", "Embed every zoo checkpoint with a pretrained model");
    common(embed);
    input(embed, "--model", o.model, "pretrain output directory");
    input(embed, "--zoo", o.zoo, "zoo-gen or align output directory");
    auto* probe = app.add_subcommand("probe", "Fit linear probes for model properties");
    common(probe);
    input(probe, "--zoo", o.zoo, "zoo-gen or align output directory");
    input(probe, "--embeddings", o.embeddings, "embed output directory");
    auto* analyze = app.add_subcommand("analyze", "Spectral and embedding analysis of a zoo");
    common(analyze);
    input(analyze, "--zoo", o.zoo, "zoo-gen or align output directory");
    input(analyze, "--embeddings", o.embeddings, "embed output directory", false);
    plot_flags(analyze);
    auto* sample = app.add_subcommand("sample", "Sample new models from prompt embeddings");
    common(sample);
    input(sample, "--model", o.model, "pretrain output directory");
    input(sample, "--zoo", o.zoo, "zoo-gen or align output directory");
    input(sample, "--embeddings", o.embeddings, "embed output directory");
    auto* finetune = app.add_subcommand("finetune", "Fine-tune sampled models against scratch baselines");
    common(finetune);
    input(finetune, "--samples", o.samples, "sample output directory");
    input(finetune, "--zoo", o.zoo, "zoo-gen or align output directory");
    auto* report = app.add_subcommand("report", "Collect stage reports into one summary");
    common(report, false);
    report->add_option("--run", o.runs, "Stage output directory (repeatable)")->required();
    plot_flags(report);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        std::cerr << app.help();
        return kExitUsage;
    }

    if (!o.quiet) {
        sane_set_log_callback(log_line, nullptr);
    }
    sane_run* run = nullptr;
    sane_status st = o.config.empty() ? sane_run_parse("{}", &run) : sane_run_load(o.config.c_str(), &run);
    if (st != SANE_OK) {
        return report_failure(st);
    }
    sane_run_set_workers(run, o.workers);
    if (o.plots || o.no_plots) {
        sane_run_set_plots(run, o.plots ? 1 : 0);
    }

    const char* out = o.out.c_str();
    auto opt = [](const std::string& s) { return s.empty() ? nullptr : s.c_str(); };
    if (zoo_gen->parsed()) {
        st = sane_zoo_gen(run, out);
    } else if (align->parsed()) {
        st = sane_align(run, o.zoo.c_str(), out);
    } else if (pretrain->parsed()) {
        st = sane_pretrain(run, o.zoo.c_str(), out);
    } else if (embed->parsed()) {
        st = sane_embed(run, o.model.c_str(), o.zoo.c_str(), out);
    } else if (probe->parsed()) {
        st = sane_probe(run, o.zoo.c_str(), o.embeddings.c_str(), out);
    } else if (analyze->parsed()) {
        st = sane_analyze(run, o.zoo.c_str(), opt(o.embeddings), out);
    } else if (sample->parsed()) {
        st = sane_sample(run, o.model.c_str(), o.zoo.c_str(), o.embeddings.c_str(), out);
    } else if (finetune->parsed()) {
        st = sane_finetune(run, o.samples.c_str(), o.zoo.c_str(), out);
    } else if (report->parsed()) {
        std::vector<const char*> dirs;
        for (const auto& r : o.runs) {
            dirs.push_back(r.c_str());
        }
        st = sane_report(run, dirs.data(), dirs.size(), out);
    }
    sane_run_free(run);
    return st == SANE_OK ? 0 : report_failure(st);
}
