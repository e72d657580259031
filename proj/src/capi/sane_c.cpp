// SPDX-License-Identifier: Apache-2.0

#include "sane/sane.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <new>
#include <string>

#include "common/error.hpp"
#include "common/parallel.hpp"
#include "pipeline/pipeline.hpp"

struct sane_run {
    sane::pipeline::RunConfig cfg;
    std::size_t workers = 0;
    int plots = -1;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_error_key;

std::mutex g_log_mutex;
sane_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

sane_status status_of(sane::ErrorKind k) {
    switch (k) {
        case sane::ErrorKind::Argument: return SANE_E_ARGUMENT;
        case sane::ErrorKind::Dimension: return SANE_E_DIMENSION;
        case sane::ErrorKind::Config: return SANE_E_CONFIG;
        case sane::ErrorKind::Format: return SANE_E_FORMAT;
        case sane::ErrorKind::Capacity: return SANE_E_CAPACITY;
        case sane::ErrorKind::Data: return SANE_E_DATA;
        case sane::ErrorKind::Io: return SANE_E_IO;
        case sane::ErrorKind::Numeric: return SANE_E_NUMERIC;
        case sane::ErrorKind::NotFound: return SANE_E_NOT_FOUND;
    }
    return SANE_E_INTERNAL;
}

template <typename Fn>
sane_status guarded(Fn&& fn) {
    g_error.clear();
    g_error_key.clear();
    try {
        fn();
        return SANE_OK;
    } catch (const sane::Error& e) {
        g_error = e.what();
        g_error_key = e.key();
        return status_of(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        g_error = e.what();
        return SANE_E_IO;
    } catch (const std::bad_alloc&) {
        g_error = "out of memory";
        return SANE_E_INTERNAL;
    } catch (const std::exception& e) {
        g_error = e.what();
        return SANE_E_INTERNAL;
    } catch (...) {
        g_error = "unknown failure";
        return SANE_E_INTERNAL;
    }
}

void forward_log(const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    if (g_log_fn) {
        g_log_fn(msg.c_str(), g_log_user);
    }
}

sane::pipeline::RunConfig effective(const sane_run* run) {
    auto cfg = run->cfg;
    if (run->plots >= 0) {
        cfg.analyze.plots = run->plots != 0;
    }
    return cfg;
}

std::size_t workers_of(const sane_run* run) {
    if (run->workers) {
        return run->workers;
    }
    return run->cfg.workers.value_or(sane::default_workers());
}

void need(const void* p, const char* what) {
    if (!p) {
        sane::fail(sane::ErrorKind::Argument, std::string(what) + " is null");
    }
}

template <typename Fn>
sane_status stage(const sane_run* run, const char* out, Fn&& fn) {
    return guarded([&] {
        need(run, "run");
        need(out, "out");
        const auto cfg = effective(run);
        const sane::pipeline::Stage s{cfg, workers_of(run), forward_log};
        fn(s, std::filesystem::path(out));
    });
}

}  // namespace

extern "C" {

const char* sane_version(void) { return "0.1.0"; }

const char* sane_status_name(sane_status status) {
    switch (status) {
        case SANE_OK: return "ok";
        case SANE_E_INTERNAL: return "internal";
        default:
            if (status < SANE_OK || status > SANE_E_INTERNAL) {
                return "unknown";
            }
            return sane::error_kind_name(static_cast<sane::ErrorKind>(status - 1));
    }
}

const char* sane_last_error(void) { return g_error.c_str(); }
const char* sane_last_error_key(void) { return g_error_key.c_str(); }

void sane_set_log_callback(sane_log_fn fn, void* user) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    g_log_fn = fn;
    g_log_user = user;
}

sane_status sane_run_load(const char* config_path, sane_run** out) {
    return guarded([&] {
        need(config_path, "config_path");
        need(out, "out");
        *out = nullptr;
        auto run = std::make_unique<sane_run>();
        run->cfg = sane::pipeline::load_run_config(config_path);
        *out = run.release();
    });
}

sane_status sane_run_parse(const char* config_json, sane_run** out) {
    return guarded([&] {
        need(config_json, "config_json");
        need(out, "out");
        *out = nullptr;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(config_json, nullptr, true, true);
        } catch (const nlohmann::json::parse_error& e) {
            sane::fail(sane::ErrorKind::Config, e.what());
        }
        auto run = std::make_unique<sane_run>();
        run->cfg = sane::pipeline::run_config_from_json(j);
        *out = run.release();
    });
}

void sane_run_free(sane_run* run) { delete run; }

sane_status sane_run_set_workers(sane_run* run, size_t workers) {
    return guarded([&] {
        need(run, "run");
        run->workers = workers;
    });
}

sane_status sane_run_set_plots(sane_run* run, int plots) {
    return guarded([&] {
        need(run, "run");
        if (plots < -1 || plots > 1) {
            sane::fail(sane::ErrorKind::Argument, "plots must be -1, 0 or 1");
        }
        run->plots = plots;
    });
}

sane_status sane_run_resolved_config(const sane_run* run, char** json_out) {
    return guarded([&] {
        need(run, "run");
        need(json_out, "json_out");
        const auto text = sane::pipeline::run_config_to_json(effective(run)).dump(2);
        char* buf = static_cast<char*>(std::malloc(text.size() + 1));
        if (!buf) {
            throw std::bad_alloc();
        }
        std::memcpy(buf, text.c_str(), text.size() + 1);
        *json_out = buf;
    });
}

void sane_string_free(char* s) { std::free(s); }

sane_status sane_zoo_gen(const sane_run* run, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) { sane::pipeline::run_zoo_gen(s, o); });
}

sane_status sane_align(const sane_run* run, const char* zoo, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(zoo, "zoo");
        sane::pipeline::run_align(s, zoo, o);
    });
}

sane_status sane_pretrain(const sane_run* run, const char* zoo, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(zoo, "zoo");
        sane::pipeline::run_pretrain(s, zoo, o);
    });
}

sane_status sane_embed(const sane_run* run, const char* model, const char* zoo, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(model, "model");
        need(zoo, "zoo");
        sane::pipeline::run_embed(s, model, zoo, o);
    });
}

sane_status sane_probe(const sane_run* run, const char* zoo, const char* embeddings, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(zoo, "zoo");
        need(embeddings, "embeddings");
        sane::pipeline::run_probe(s, zoo, embeddings, o);
    });
}

sane_status sane_analyze(const sane_run* run, const char* zoo, const char* embeddings, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(zoo, "zoo");
        sane::pipeline::run_analyze(s, zoo, embeddings ? std::filesystem::path(embeddings)
                                                       : std::filesystem::path(), o);
    });
}

sane_status sane_sample(const sane_run* run, const char* model, const char* zoo, const char* embeddings,
                        const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(model, "model");
        need(zoo, "zoo");
        need(embeddings, "embeddings");
        sane::pipeline::run_sample(s, model, zoo, embeddings, o);
    });
}

sane_status sane_finetune(const sane_run* run, const char* samples, const char* zoo, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        need(samples, "samples");
        need(zoo, "zoo");
        sane::pipeline::run_finetune(s, samples, zoo, o);
    });
}

sane_status sane_report(const sane_run* run, const char* const* runs, size_t n_runs, const char* out) {
    return stage(run, out, [&](const auto& s, const auto& o) {
        if (n_runs) {
            need(runs, "runs");
        }
        std::vector<std::filesystem::path> dirs;
        for (size_t i = 0; i < n_runs; ++i) {
            need(runs[i], "runs[i]");
            dirs.emplace_back(runs[i]);
        }
        sane::pipeline::run_report(s, dirs, o);
    });
}

}  // extern "C"
