// SPDX-License-Identifier: Apache-2.0

#include "pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include <fmt/format.h>

#include "align/align.hpp"
#include "analyze/plot.hpp"
#include "analyze/probe.hpp"
#include "analyze/spectral.hpp"
#include "common/container.hpp"
#include "common/hash.hpp"
#include "common/parallel.hpp"
#include "embed/embed.hpp"
#include "model/pretrain.hpp"
#include "sample/sample.hpp"
#include "zoo/checkpoint_io.hpp"

namespace sane::pipeline {

namespace {

void note(const Stage& s, const std::string& msg) {
    if (s.log) {
        s.log(msg);
    }
}

void require_input(const fs::path& p, const char* role) {
    if (!fs::exists(p)) {
        fail(ErrorKind::NotFound, fmt::format("{} input not found: {}", role, p.string()), p.string());
    }
}

void prepare_output(const fs::path& out) {
    if (fs::exists(out)) {
        require(fs::is_directory(out) && fs::is_empty(out), ErrorKind::Io,
                fmt::format("output directory {} exists and is not empty", out.string()));
    }
    fs::create_directories(out);
}

nlohmann::json start(const Stage& s, const fs::path& out, const std::string& stage,
                     const std::vector<std::pair<std::string, fs::path>>& inputs) {
    nlohmann::json prov;
    for (const auto& [role, path] : inputs) {
        require_input(path, role.c_str());
        prov[role] = content_hash(path);
    }
    prepare_output(out);
    const auto resolved = run_config_to_json(s.cfg);
    write_json(out / "resolved_config.json", resolved);
    nlohmann::json report;
    report["stage"] = stage;
    report["provenance"] = {{"config_hash", git_blob_id(resolved.dump())},
                            {"inputs", prov.is_null() ? nlohmann::json::object() : prov}};
    return report;
}

void finish(const fs::path& out, const std::string& stage, const nlohmann::json& report) {
    write_json(out / (stage + "_report.json"), report);
}

nlohmann::json finite_or_null(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::int64_t last_epoch(const zoo::ZooManifest& m) {
    std::int64_t e = 0;
    for (const auto& x : m.entries) {
        e = std::max(e, x.epoch);
    }
    return e;
}

struct LoadedModel {
    model::SaneModel sane;
    tok::PreprocessState prep;
};

LoadedModel load_pretrained(const fs::path& pretrain_dir) {
    const fs::path dir = pretrain_dir / "model";
    require_input(dir, "model");
    nlohmann::json meta;
    auto m = model::SaneModel::load(dir, &meta);
    require(meta.contains("preprocess"), ErrorKind::Format, "model has no preprocessing state");
    return {std::move(m), tok::preprocess_from_json(meta.at("preprocess"))};
}

std::size_t chunk_of(const Stage& s, const model::SaneModel& m) {
    return s.cfg.embed.chunk.value_or(m.config().ws);
}

std::size_t halo_of(const Stage& s, const model::SaneModel& m) {
    return s.cfg.embed.halo.value_or(embed::default_halo(m));
}

std::vector<embed::EmbeddingSequence> load_embeddings_dir(const fs::path& embed_dir) {
    require_input(embed_dir / "embeddings", "embeddings");
    return embed::load_embeddings(embed_dir / "embeddings");
}

/// Entry index for each embedding, matched on (model id, epoch).
std::vector<std::size_t> match_entries(const zoo::ZooManifest& m,
                                       const std::vector<embed::EmbeddingSequence>& es) {
    std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> idx;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        idx[{m.entries[i].model_id, m.entries[i].epoch}] = i;
    }
    std::vector<std::size_t> out;
    for (const auto& e : es) {
        auto it = idx.find({e.model_id, e.epoch});
        require(it != idx.end(), ErrorKind::Data,
                fmt::format("embedding for model {} epoch {} has no zoo entry", e.model_id, e.epoch));
        out.push_back(it->second);
    }
    return out;
}

}  // namespace

fs::path cache_dir() {
    const char* env = std::getenv("SANE_CACHE_DIR");
    return env && *env ? fs::path(env) : fs::path();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path) {
    require_input(path, "json");
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::Format, fmt::format("{}: {}", path.string(), e.what()));
    }
}

nlohmann::json run_zoo_gen(const Stage& s, const fs::path& out) {
    auto report = start(s, out, "zoo", {});
    const auto spec_json = run_config_to_json(s.cfg)["zoo"];
    const std::string key = git_blob_id(spec_json.dump()).substr(0, 16);
    const fs::path cache = cache_dir().empty() ? fs::path() : cache_dir() / ("zoo-" + key);
    zoo::Zoo z;
    bool hit = false;
    if (!cache.empty() && fs::exists(cache / "zoo.json")) {
        note(s, fmt::format("zoo cache hit {}", cache.string()));
        z = zoo::load_zoo(cache);
        hit = true;
    } else {
        note(s, fmt::format("training {} base models", s.cfg.zoo.n_models));
        z = zoo::train_zoo(s.cfg.zoo, s.workers);
    }
    const fs::path zdir = out / "zoo";
    zoo::save_zoo(z, zdir);
    if (!cache.empty() && !hit) {
        fs::create_directories(cache.parent_path());
        const fs::path tmp = cache.string() + ".tmp";
        fs::remove_all(tmp);
        fs::copy(zdir, tmp, fs::copy_options::recursive);
        fs::rename(tmp, cache);
    }
    std::map<std::int64_t, std::pair<double, std::size_t>> acc;
    for (const auto& e : z.manifest.entries) {
        acc[e.epoch].first += e.test_acc;
        acc[e.epoch].second += 1;
    }
    nlohmann::json by_epoch = nlohmann::json::object();
    for (const auto& [epoch, v] : acc) {
        by_epoch[std::to_string(epoch)] = v.first / double(v.second);
    }
    report["models"] = z.manifest.model_ids().size();
    report["checkpoints"] = z.manifest.entries.size();
    report["excluded"] = z.manifest.excluded.size();
    report["mean_test_acc_by_epoch"] = by_epoch;
    report["splits"] = {{"train", z.manifest.model_ids(zoo::Split::Train).size()},
                        {"val", z.manifest.model_ids(zoo::Split::Val).size()},
                        {"test", z.manifest.model_ids(zoo::Split::Test).size()}};
    finish(out, "zoo", report);
    return report;
}

nlohmann::json run_align(const Stage& s, const fs::path& zoo_dir, const fs::path& out) {
    auto report = start(s, out, "align", {{"zoo", zoo_dir / "zoo"}});
    auto z = zoo::load_zoo(zoo_dir / "zoo");
    if (!s.cfg.align.enabled) {
        note(s, "alignment disabled; copying zoo");
        zoo::save_zoo(z, out / "zoo");
        report["enabled"] = false;
        finish(out, "align", report);
        return report;
    }
    const auto ref = s.cfg.align.reference_id.value_or(align::default_reference(z.manifest));
    note(s, fmt::format("aligning to reference model {}", ref));
    const auto stats = align::align_zoo(z, ref, s.cfg.align.max_sweeps, s.workers);
    zoo::save_zoo(z, out / "zoo");
    double before = 0.0;
    double after = 0.0;
    std::size_t improved = 0;
    std::string csv = "model_id,distance_before,distance_after\n";
    for (const auto& st : stats) {
        before += st.distance_before;
        after += st.distance_after;
        improved += st.distance_after < st.distance_before ? 1 : 0;
        csv += fmt::format("{},{:.9g},{:.9g}\n", st.model_id, st.distance_before, st.distance_after);
    }
    write_text(out / "alignment.csv", csv);
    const double n = std::max<double>(1.0, double(stats.size()));
    report["enabled"] = true;
    report["reference_id"] = ref;
    report["models"] = stats.size();
    report["mean_distance_before"] = before / n;
    report["mean_distance_after"] = after / n;
    report["improved"] = improved;
    finish(out, "align", report);
    return report;
}

nlohmann::json run_pretrain(const Stage& s, const fs::path& zoo_dir, const fs::path& out) {
    auto report = start(s, out, "pretrain", {{"zoo", zoo_dir / "zoo"}});
    const auto z = zoo::load_zoo(zoo_dir / "zoo");
    model::PretrainOptions opts;
    opts.on_epoch = [&](const model::EpochLog& l) {
        note(s, fmt::format("epoch {} train_rec {:.5f} train_con {:.4f} val_rec {:.5f} val_con {:.4f}",
                            l.epoch, l.train_rec, l.train_con, l.val_rec, l.val_con));
    };
    auto res = model::pretrain(z, s.cfg.sane, opts);
    res.model.save(out / "model", {{"preprocess", tok::preprocess_to_json(res.preprocess)},
                                   {"best_epoch", res.best_epoch}});
    write_text(out / "train_log.csv", model::log_to_csv(res.log));
    nlohmann::json log = nlohmann::json::array();
    for (const auto& l : res.log) {
        log.push_back({{"epoch", l.epoch},
                       {"lr", l.lr},
                       {"train_rec", l.train_rec},
                       {"train_con", l.train_con},
                       {"val_rec", l.val_rec},
                       {"val_con", l.val_con}});
    }
    report["sane"] = model::config_to_json(s.cfg.sane);
    report["parameters"] = res.model.num_parameters();
    report["best_epoch"] = res.best_epoch;
    report["best_val_loss"] = res.best_val;
    report["best_val_rec"] = res.log.at(res.best_epoch - 1).val_rec;
    report["log"] = log;
    finish(out, "pretrain", report);
    return report;
}

nlohmann::json run_embed(const Stage& s, const fs::path& pretrain_dir, const fs::path& zoo_dir,
                         const fs::path& out) {
    auto report = start(s, out, "embed", {{"model", pretrain_dir / "model"}, {"zoo", zoo_dir / "zoo"}});
    const auto z = zoo::load_zoo(zoo_dir / "zoo");
    const auto lm = load_pretrained(pretrain_dir);
    const std::size_t chunk = chunk_of(s, lm.sane);
    const std::size_t halo = halo_of(s, lm.sane);
    const std::size_t n = z.manifest.entries.size();
    note(s, fmt::format("embedding {} checkpoints (chunk {}, halo {})", n, chunk, halo));
    std::vector<embed::EmbeddingSequence> es(n);
    std::vector<double> rec(n);
    parallel_for(n, s.workers, [&](std::size_t i) {
        const auto t = tok::tokenize(tok::standardize(z.checkpoints[i], lm.prep), lm.prep.d_t);
        es[i] = embed::embed_model(lm.sane, t, chunk, halo);
        es[i].model_id = z.manifest.entries[i].model_id;
        es[i].epoch = z.manifest.entries[i].epoch;
        const auto back = embed::decode_sequence(lm.sane, es[i].z, es[i].positions, chunk, halo);
        double se = 0.0;
        double cnt = 0.0;
        for (std::size_t k = 0; k < t.tokens.size(); ++k) {
            const double d = double(back[k]) - double(t.tokens[k]);
            se += t.mask[k] * d * d;
            cnt += t.mask[k];
        }
        rec[i] = se / cnt;
    });
    embed::save_embeddings(es, out / "embeddings");
    write_text(out / "embeddings.csv", embed::embeddings_csv(es));
    std::map<std::string, std::pair<double, std::size_t>> by_split;
    for (std::size_t i = 0; i < n; ++i) {
        auto& v = by_split[zoo::split_name(z.manifest.entries[i].split)];
        v.first += rec[i];
        v.second += 1;
    }
    nlohmann::json rj = nlohmann::json::object();
    for (const auto& [k, v] : by_split) {
        rj[k] = v.first / double(v.second);
    }
    std::vector<tok::TokenSequence> held;
    for (std::size_t i = 0; i < n; ++i) {
        if (z.manifest.entries[i].split == zoo::Split::Test) {
            held.push_back(tok::tokenize(tok::standardize(z.checkpoints[i], lm.prep), lm.prep.d_t));
        }
    }
    if (!held.empty()) {
        const std::size_t ws = lm.sane.config().ws;
        const std::vector<std::size_t> windows{std::max<std::size_t>(1, ws / 4), ws, 4 * ws, 0};
        std::vector<const tok::TokenSequence*> ptrs;
        for (const auto& t : held) {
            ptrs.push_back(&t);
        }
        const auto curve = embed::window_curve(lm.sane, ptrs, windows, s.workers);
        nlohmann::json wc = nlohmann::json::array();
        for (std::size_t k = 0; k < windows.size(); ++k) {
            wc.push_back({{"window", windows[k] == 0 ? nlohmann::json("full") : nlohmann::json(windows[k])},
                          {"reconstruction_mse", curve[k]}});
        }
        report["window_curve"] = wc;
    }
    report["count"] = n;
    report["chunk"] = chunk;
    report["halo"] = halo;
    report["d_z"] = lm.sane.config().d_z;
    report["reconstruction_mse_by_split"] = rj;
    finish(out, "embed", report);
    return report;
}

nlohmann::json run_probe(const Stage& s, const fs::path& zoo_dir, const fs::path& embed_dir,
                         const fs::path& out) {
    auto report = start(s, out, "probe",
                        {{"zoo", zoo_dir / "zoo"}, {"embeddings", embed_dir / "embeddings"}});
    const auto z = zoo::load_zoo(zoo_dir / "zoo");
    const auto es = load_embeddings_dir(embed_dir);
    const auto entry_of = match_entries(z.manifest, es);

    using FeatureFn = std::function<std::vector<double>(std::size_t)>;
    const std::vector<std::pair<std::string, FeatureFn>> sources{
        {"sane", [&](std::size_t i) { return embed::aggregate_mean(es[i]); }},
        {"stats", [&](std::size_t i) { return analyze::weight_statistics(z.checkpoints[entry_of[i]]); }},
        {"weights", [&](std::size_t i) { return analyze::flatten_weights(z.checkpoints[entry_of[i]]); }},
    };
    std::vector<std::vector<std::vector<double>>> features(sources.size(),
                                                           std::vector<std::vector<double>>(es.size()));
    parallel_for(es.size(), s.workers, [&](std::size_t i) {
        for (std::size_t f = 0; f < sources.size(); ++f) {
            features[f][i] = sources[f].second(i);
        }
    });

    nlohmann::json results = nlohmann::json::array();
    std::string csv = "target,features,r2,ok,n_train,n_test\n";
    for (const auto& tname : s.cfg.probe.targets) {
        const auto target = analyze::parse_target(tname);
        for (std::size_t f = 0; f < sources.size(); ++f) {
            analyze::ProbeData train;
            analyze::ProbeData test;
            for (std::size_t i = 0; i < es.size(); ++i) {
                const auto& entry = z.manifest.entries[entry_of[i]];
                analyze::ProbeData* dst = entry.split == zoo::Split::Train  ? &train
                                          : entry.split == zoo::Split::Test ? &test
                                                                            : nullptr;
                if (!dst) {
                    continue;
                }
                dst->model_ids.push_back(entry.model_id);
                dst->features.push_back(features[f][i]);
                dst->targets.push_back(analyze::target_value(entry, target));
            }
            auto r = analyze::linear_probe(train, test);
            r.target = tname;
            r.features = sources[f].first;
            note(s, fmt::format("probe {} from {}: R2 {}", tname, r.features,
                                r.ok ? fmt::format("{:.4f}", r.r2) : r.failure));
            results.push_back(analyze::probe_to_json(r));
            csv += fmt::format("{},{},{},{},{},{}\n", tname, r.features,
                               r.ok ? fmt::format("{:.9g}", r.r2) : std::string("nan"), r.ok ? 1 : 0,
                               r.n_train, r.n_test);
        }
    }
    write_text(out / "probe.csv", csv);
    report["results"] = results;
    finish(out, "probe", report);
    return report;
}

nlohmann::json run_analyze(const Stage& s, const fs::path& zoo_dir, const fs::path& embed_dir,
                           const fs::path& out) {
    std::vector<std::pair<std::string, fs::path>> inputs{{"zoo", zoo_dir / "zoo"}};
    if (!embed_dir.empty()) {
        inputs.emplace_back("embeddings", embed_dir / "embeddings");
    }
    auto report = start(s, out, "analyze", inputs);
    const auto z = zoo::load_zoo(zoo_dir / "zoo");
    const std::size_t n = z.manifest.entries.size();
    std::vector<analyze::SpectralReport> spectra(n);
    parallel_for(n, s.workers,
                 [&](std::size_t i) { spectra[i] = analyze::spectral_report(z.checkpoints[i]); });

    std::vector<std::vector<double>> spread(n);
    if (!embed_dir.empty()) {
        const auto es = load_embeddings_dir(embed_dir);
        const auto entry_of = match_entries(z.manifest, es);
        for (std::size_t i = 0; i < es.size(); ++i) {
            spread[entry_of[i]] = embed::layer_spread(es[i]);
        }
    }
    const std::size_t n_layers = z.manifest.arch.learnable_layers().size();

    std::string csv = "model_id,epoch,split,test_acc,ggap,mean_log_spectral_norm,mean_alpha,"
                      "mean_weighted_alpha,failed_fits";
    for (std::size_t l = 1; l <= n_layers; ++l) {
        csv += fmt::format(",spread_{}", l);
    }
    csv += "\n";
    auto fmt_num = [](double v) { return std::isfinite(v) ? fmt::format("{:.9g}", v) : "nan"; };
    std::vector<double> acc;
    std::vector<double> lsn;
    std::vector<double> walpha;
    std::vector<double> mspread;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = z.manifest.entries[i];
        const auto& r = spectra[i];
        csv += fmt::format("{},{},{},{},{},{},{},{},{}", e.model_id, e.epoch, zoo::split_name(e.split),
                           fmt_num(e.test_acc), fmt_num(e.ggap), fmt_num(r.mean_log_spectral_norm),
                           fmt_num(r.mean_alpha), fmt_num(r.mean_weighted_alpha), r.failed_fits);
        for (std::size_t l = 0; l < n_layers; ++l) {
            csv += "," + (l < spread[i].size() ? fmt_num(spread[i][l]) : std::string("nan"));
        }
        csv += "\n";
        acc.push_back(e.test_acc);
        lsn.push_back(r.mean_log_spectral_norm);
        walpha.push_back(r.mean_weighted_alpha);
        double m = std::nan("");
        if (!spread[i].empty()) {
            m = 0.0;
            for (double v : spread[i]) {
                m += v;
            }
            m /= double(spread[i].size());
        }
        mspread.push_back(m);
    }
    write_text(out / "analysis.csv", csv);

    auto corr = [&](const std::vector<double>& x) -> nlohmann::json {
        std::vector<double> a;
        std::vector<double> b;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (std::isfinite(x[i])) {
                a.push_back(x[i]);
                b.push_back(acc[i]);
            }
        }
        if (a.size() < 3) {
            return nullptr;
        }
        return finite_or_null(analyze::pearson(a, b));
    };
    report["correlation_with_test_acc"] = {{"mean_log_spectral_norm", corr(lsn)},
                                           {"mean_weighted_alpha", corr(walpha)},
                                           {"mean_layer_spread", corr(mspread)}};
    std::size_t failed = 0;
    for (const auto& r : spectra) {
        failed += r.failed_fits;
    }
    report["checkpoints"] = n;
    report["failed_fits"] = failed;

    if (s.cfg.analyze.plots) {
        write_text(out / "spectral_norm_vs_acc.svg",
                   analyze::svg_plot({{"", lsn, acc}}, {"log spectral norm vs accuracy",
                                                         "mean log10 spectral norm", "test accuracy"}));
        if (!embed_dir.empty()) {
            write_text(out / "spread_vs_acc.svg",
                       analyze::svg_plot({{"", mspread, acc}},
                                         {"layer spread vs accuracy", "mean layer spread", "test accuracy"}));
            std::map<std::int64_t, std::vector<std::pair<double, std::size_t>>> by_epoch;
            for (std::size_t i = 0; i < n; ++i) {
                auto& v = by_epoch[z.manifest.entries[i].epoch];
                v.resize(n_layers);
                for (std::size_t l = 0; l < std::min(n_layers, spread[i].size()); ++l) {
                    v[l].first += spread[i][l];
                    v[l].second += 1;
                }
            }
            std::vector<analyze::Series> series;
            for (const auto& [epoch, v] : by_epoch) {
                analyze::Series se;
                se.label = fmt::format("epoch {}", epoch);
                for (std::size_t l = 0; l < n_layers; ++l) {
                    se.x.push_back(double(l + 1));
                    se.y.push_back(v[l].second ? v[l].first / double(v[l].second) : std::nan(""));
                }
                series.push_back(std::move(se));
            }
            write_text(out / "spread_by_layer.svg",
                       analyze::svg_plot(series, {"layer spread by layer", "layer", "spread", true}));
        }
    }
    finish(out, "analyze", report);
    return report;
}

nlohmann::json run_sample(const Stage& s, const fs::path& pretrain_dir, const fs::path& zoo_dir,
                          const fs::path& embed_dir, const fs::path& out) {
    auto report = start(s, out, "sample",
                        {{"model", pretrain_dir / "model"},
                         {"zoo", zoo_dir / "zoo"},
                         {"embeddings", embed_dir / "embeddings"}});
    const auto z = zoo::load_zoo(zoo_dir / "zoo");
    const auto lm = load_pretrained(pretrain_dir);
    const auto es = load_embeddings_dir(embed_dir);
    const auto entry_of = match_entries(z.manifest, es);
    const std::int64_t epoch = s.cfg.prompts.epoch.value_or(last_epoch(z.manifest));

    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < es.size(); ++i) {
        const auto& e = z.manifest.entries[entry_of[i]];
        if (e.split == s.cfg.prompts.split && e.epoch == epoch) {
            picked.push_back(i);
        }
    }
    std::sort(picked.begin(), picked.end(),
              [&](std::size_t a, std::size_t b) { return es[a].model_id < es[b].model_id; });
    if (s.cfg.prompts.count && picked.size() > *s.cfg.prompts.count) {
        picked.resize(*s.cfg.prompts.count);
    }
    if (s.cfg.sample.prior == sample::Prior::Kde) {
        require(!picked.empty(), ErrorKind::Data,
                fmt::format("no {} prompts at epoch {}", zoo::split_name(s.cfg.prompts.split), epoch));
    }
    std::vector<const embed::EmbeddingSequence*> prompts;
    std::vector<std::int64_t> prompt_ids;
    for (std::size_t i : picked) {
        prompts.push_back(&es[i]);
        prompt_ids.push_back(es[i].model_id);
    }

    const auto data = zoo::generate_splits(z.manifest.task);
    sample::SampleContext ctx;
    ctx.sane = &lm.sane;
    ctx.preprocess = &lm.prep;
    ctx.arch = s.cfg.prompts.target_arch.value_or(z.manifest.arch);
    ctx.select_data = &data.val;
    ctx.bn_data = &data.train;
    ctx.workers = s.workers;
    auto cfg = s.cfg.sample;
    if (!cfg.chunk) {
        cfg.chunk = chunk_of(s, lm.sane);
    }
    if (!cfg.halo && s.cfg.embed.halo) {
        cfg.halo = s.cfg.embed.halo;
    }
    note(s, fmt::format("sampling k={} m={} over {} iterations from {} prompts", cfg.k, cfg.m,
                        cfg.bootstrap_iters, prompts.size()));
    const auto res = sample::bootstrap(ctx, prompts, cfg);

    std::vector<std::string> paths;
    nlohmann::json test_acc = nlohmann::json::array();
    for (std::size_t i = 0; i < res.models.size(); ++i) {
        const std::string rel = fmt::format("models/rank_{:03}", i);
        zoo::save_checkpoint(res.models[i], out / rel);
        paths.push_back(rel);
        test_acc.push_back(zoo::evaluate(res.models[i], data.test).accuracy);
    }
    report["result"] = sample::result_to_json(res, cfg, paths);
    report["test_accuracy"] = test_acc;
    report["prompt_epoch"] = epoch;
    report["prompt_model_ids"] = prompt_ids;
    report["target_arch"] = zoo::arch_to_json(ctx.arch);
    finish(out, "sample", report);
    return report;
}

nlohmann::json run_finetune(const Stage& s, const fs::path& sample_dir, const fs::path& zoo_dir,
                            const fs::path& out) {
    auto report = start(s, out, "finetune",
                        {{"samples", sample_dir / "models"}, {"zoo", zoo_dir / "zoo"}});
    const auto manifest =
        zoo::manifest_from_json(nlohmann::json::parse(read_text(zoo_dir / "zoo" / "zoo.json")));
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(sample_dir / "models")) {
        if (e.is_directory()) {
            dirs.push_back(e.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    if (s.cfg.finetune.models && dirs.size() > s.cfg.finetune.models) {
        dirs.resize(s.cfg.finetune.models);
    }
    require(!dirs.empty(), ErrorKind::Data, "no sampled models to fine-tune");
    std::vector<zoo::ModelCheckpoint> models;
    for (const auto& d : dirs) {
        models.push_back(zoo::load_checkpoint(d));
    }
    const auto data = zoo::generate_splits(manifest.task);
    const std::size_t epochs = s.cfg.finetune.epochs;
    const std::size_t n_scratch = s.cfg.finetune.scratch_seeds;

    std::vector<sample::Trajectory> sampled(models.size());
    std::vector<sample::Trajectory> scratch(n_scratch);
    parallel_for(models.size() + n_scratch, s.workers, [&](std::size_t i) {
        if (i < models.size()) {
            sampled[i] = sample::finetune(models[i], data, epochs, s.cfg.zoo.train,
                                          derive_seed(s.cfg.seed, 300 + i));
        } else {
            const std::size_t k = i - models.size();
            const auto init = zoo::init_checkpoint(models.front().arch, derive_seed(s.cfg.seed, 500 + k));
            scratch[k] = sample::finetune(init, data, epochs, s.cfg.zoo.train,
                                          derive_seed(s.cfg.seed, 700 + k));
        }
    });

    auto mean_curve = [&](const std::vector<sample::Trajectory>& ts) {
        nlohmann::json c = nlohmann::json::array();
        for (std::size_t e = 0; e <= epochs; ++e) {
            double sum = 0.0;
            std::size_t cnt = 0;
            for (const auto& t : ts) {
                if (e < t.points.size()) {
                    sum += t.points[e].accuracy;
                    ++cnt;
                }
            }
            c.push_back(cnt ? nlohmann::json(sum / double(cnt)) : nlohmann::json(nullptr));
        }
        return c;
    };
    auto curves = [&](const std::vector<sample::Trajectory>& ts) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& t : ts) {
            nlohmann::json pts = nlohmann::json::array();
            for (const auto& p : t.points) {
                pts.push_back(p.accuracy);
            }
            a.push_back({{"accuracy", pts}, {"diverged", t.diverged}});
        }
        return a;
    };
    report["epochs"] = epochs;
    report["sampled"] = curves(sampled);
    report["scratch"] = curves(scratch);
    report["sampled_mean"] = mean_curve(sampled);
    report["scratch_mean"] = mean_curve(scratch);
    if (models.size() >= 2) {
        double mean_single = 0.0;
        for (const auto& m : models) {
            mean_single += zoo::evaluate(m, data.test).accuracy;
        }
        report["ensemble_accuracy"] = sample::ensemble_eval(models, data.test);
        report["ensemble_member_mean"] = mean_single / double(models.size());
    }
    finish(out, "finetune", report);
    return report;
}

nlohmann::json run_report(const Stage& s, const std::vector<fs::path>& runs, const fs::path& out) {
    std::vector<std::pair<std::string, fs::path>> found;
    for (const auto& r : runs) {
        require_input(r, "run");
        for (const auto& e : fs::directory_iterator(r)) {
            const auto name = e.path().filename().string();
            if (e.is_regular_file() && name.size() > 12 &&
                name.compare(name.size() - 12, 12, "_report.json") == 0) {
                found.emplace_back(name.substr(0, name.size() - 12), e.path());
            }
        }
    }
    std::sort(found.begin(), found.end());
    std::vector<std::pair<std::string, fs::path>> inputs;
    for (const auto& [stage, path] : found) {
        inputs.emplace_back(stage, path);
    }
    auto report = start(s, out, "summary", inputs);
    nlohmann::json stages = nlohmann::json::object();
    for (const auto& [stage, path] : found) {
        stages[stage] = read_json(path);
    }
    report["stages"] = stages;

    std::string md = "# Run summary\n\n";
    if (stages.contains("zoo")) {
        md += fmt::format("- zoo: {} models, {} checkpoints\n", stages["zoo"]["models"].dump(),
                          stages["zoo"]["checkpoints"].dump());
    }
    if (stages.contains("align") && stages["align"].value("enabled", false)) {
        md += fmt::format("- alignment: mean distance {} -> {}\n",
                          stages["align"]["mean_distance_before"].dump(),
                          stages["align"]["mean_distance_after"].dump());
    }
    if (stages.contains("pretrain")) {
        md += fmt::format("- pretraining: best epoch {}, val L_rec {}\n",
                          stages["pretrain"]["best_epoch"].dump(),
                          stages["pretrain"]["best_val_rec"].dump());
    }
    if (stages.contains("probe")) {
        md += "\n| target | features | R2 |\n|---|---|---|\n";
        for (const auto& r : stages["probe"]["results"]) {
            md += fmt::format("| {} | {} | {} |\n", r["target"].get<std::string>(),
                              r["features"].get<std::string>(), r["r2"].dump());
        }
        md += "\n";
    }
    if (stages.contains("sample")) {
        md += fmt::format("- sampling: kept test accuracy {}\n", stages["sample"]["test_accuracy"].dump());
    }
    if (stages.contains("finetune")) {
        md += fmt::format("- fine-tuning: sampled {} vs scratch {}\n",
                          stages["finetune"]["sampled_mean"].dump(),
                          stages["finetune"]["scratch_mean"].dump());
    }
    write_text(out / "summary.md", md);

    if (s.cfg.analyze.plots && stages.contains("pretrain")) {
        analyze::Series train{"train L_rec", {}, {}};
        analyze::Series val{"val L_rec", {}, {}};
        for (const auto& l : stages["pretrain"]["log"]) {
            train.x.push_back(l["epoch"].get<double>());
            train.y.push_back(l["train_rec"].get<double>());
            val.x.push_back(l["epoch"].get<double>());
            val.y.push_back(l["val_rec"].get<double>());
        }
        write_text(out / "pretrain_loss.svg",
                   analyze::svg_plot({train, val}, {"reconstruction loss", "epoch", "L_rec", true}));
    }
    if (s.cfg.analyze.plots && stages.contains("embed") && stages["embed"].contains("window_curve")) {
        analyze::Series curve{"test split", {}, {}};
        double full = 0.0;
        for (const auto& p : stages["embed"]["window_curve"]) {
            if (p["window"].is_number()) {
                full = std::max(full, p["window"].get<double>());
                curve.x.push_back(p["window"].get<double>());
            } else {
                curve.x.push_back(2.0 * full);
            }
            curve.y.push_back(p["reconstruction_mse"].get<double>());
        }
        write_text(out / "window_curve.svg",
                   analyze::svg_plot({curve}, {"reconstruction by inference window",
                                               "window (last point: full sequence)", "L_rec", true}));
    }
    finish(out, "summary", report);
    return report;
}

}  // namespace sane::pipeline
