// SPDX-License-Identifier: Apache-2.0

#include "sample/sample.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "common/config_reader.hpp"
#include "common/parallel.hpp"

namespace sane::sample {

void SampleConfig::validate() const {
    auto bad = [](const char* key, const std::string& what) {
        fail(ErrorKind::Config, fmt::format("sample.{}: {}", key, what), std::string("sample.") + key);
    };
    if (k < 1) {
        bad("k", "must be at least 1");
    }
    if (m < 1 || m > k) {
        bad("m", "must satisfy 1 <= m <= k");
    }
    if (bootstrap_iters < 1) {
        bad("bootstrap_iters", "must be at least 1");
    }
    if (bandwidth == Bandwidth::Fixed && !(fixed_h > 0.0)) {
        bad("fixed_h", "must be positive");
    }
    if (bn_batch_size < 2) {
        bad("bn_batch_size", "must be at least 2");
    }
    if (chunk && *chunk < 1) {
        bad("chunk", "must be at least 1");
    }
}

nlohmann::json sample_config_to_json(const SampleConfig& c) {
    nlohmann::json j{{"k", c.k},
                     {"m", c.m},
                     {"bootstrap_iters", c.bootstrap_iters},
                     {"bandwidth", c.bandwidth == Bandwidth::Scott ? "scott" : "fixed"},
                     {"fixed_h", c.fixed_h},
                     {"prior", c.prior == Prior::Kde ? "kde" : "gaussian"},
                     {"kde", c.kde == KdeKind::Joint ? "joint" : "factorized"},
                     {"bn_batches", c.bn_batches},
                     {"bn_batch_size", c.bn_batch_size},
                     {"seed", c.seed}};
    j["halo"] = c.halo ? nlohmann::json(*c.halo) : nlohmann::json(nullptr);
    j["chunk"] = c.chunk ? nlohmann::json(*c.chunk) : nlohmann::json(nullptr);
    return j;
}

SampleConfig sample_config_from_json(const nlohmann::json& j, const std::string& path) {
    SampleConfig c;
    ConfigReader r(j, path);
    r.get("k", c.k);
    r.get("m", c.m);
    r.get("bootstrap_iters", c.bootstrap_iters);
    std::string bw = "scott";
    r.get("bandwidth", bw);
    if (bw == "scott") {
        c.bandwidth = Bandwidth::Scott;
    } else if (bw == "fixed") {
        c.bandwidth = Bandwidth::Fixed;
    } else {
        fail(ErrorKind::Config, fmt::format("{}.bandwidth: unknown rule '{}'", path, bw),
             path + ".bandwidth");
    }
    r.get("fixed_h", c.fixed_h);
    std::string prior = "kde";
    r.get("prior", prior);
    if (prior == "kde") {
        c.prior = Prior::Kde;
    } else if (prior == "gaussian") {
        c.prior = Prior::Gaussian;
    } else {
        fail(ErrorKind::Config, fmt::format("{}.prior: unknown prior '{}'", path, prior),
             path + ".prior");
    }
    std::string kind = "factorized";
    r.get("kde", kind);
    if (kind == "factorized") {
        c.kde = KdeKind::Factorized;
    } else if (kind == "joint") {
        c.kde = KdeKind::Joint;
    } else {
        fail(ErrorKind::Config, fmt::format("{}.kde: unknown kind '{}'", path, kind), path + ".kde");
    }
    r.get("bn_batches", c.bn_batches);
    r.get("bn_batch_size", c.bn_batch_size);
    for (auto [key, slot] : {std::pair{"halo", &c.halo}, std::pair{"chunk", &c.chunk}}) {
        if (r.has(key) && !j.at(key).is_null()) {
            std::size_t v = 0;
            r.get(key, v);
            *slot = v;
        }
    }
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

std::size_t Kde::uncovered() const {
    return static_cast<std::size_t>(
        std::count_if(centers.begin(), centers.end(), [](const TensorF& c) { return c.rows() == 0; }));
}

Kde fit_kde(const std::vector<const EmbeddingSequence*>& prompts,
            const std::vector<tok::Position>& target, Bandwidth rule, double fixed_h) {
    require(!prompts.empty(), ErrorKind::Argument, "KDE needs at least one prompt example");
    const std::size_t d = prompts.front()->z.cols();
    for (const auto* p : prompts) {
        require(p->z.cols() == d, ErrorKind::Dimension, "prompt embeddings differ in d_z");
        require(p->z.rows() == p->positions.size(), ErrorKind::Dimension,
                "prompt embedding rows do not match its positions");
    }
    Kde kde;
    kde.d_z = d;
    kde.positions = target;
    kde.centers.resize(target.size());
    kde.bandwidth.assign(target.size(), std::vector<double>(d, 1.0));
    kde.source.resize(target.size());
    kde.prompts = prompts.size();

    std::vector<std::map<std::pair<std::int64_t, std::int64_t>, std::size_t>> index(prompts.size());
    for (std::size_t e = 0; e < prompts.size(); ++e) {
        for (std::size_t r = 0; r < prompts[e]->positions.size(); ++r) {
            const auto& p = prompts[e]->positions[r];
            index[e][{p[1], p[2]}] = r;
        }
    }
    for (std::size_t n = 0; n < target.size(); ++n) {
        std::vector<const float*> rows;
        for (std::size_t e = 0; e < prompts.size(); ++e) {
            auto it = index[e].find({target[n][1], target[n][2]});
            if (it != index[e].end()) {
                rows.push_back(prompts[e]->z.row(it->second));
                kde.source[n].push_back(e);
            }
        }
        if (rows.empty()) {
            continue;
        }
        TensorF c(rows.size(), d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy_n(rows[i], d, c.row(i));
        }
        const double count = static_cast<double>(rows.size());
        for (std::size_t j = 0; j < d; ++j) {
            double h = fixed_h;
            if (rule == Bandwidth::Scott) {
                double sd = 0.0;
                if (rows.size() > 1) {
                    double mean = 0.0;
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                        mean += c(i, j);
                    }
                    mean /= count;
                    double ss = 0.0;
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                        ss += (c(i, j) - mean) * (c(i, j) - mean);
                    }
                    sd = std::sqrt(ss / (count - 1.0));
                }
                h = sd * std::pow(count, -0.2);
            }
            kde.bandwidth[n][j] = std::max(h, kBandwidthFloor);
        }
        kde.centers[n] = std::move(c);
    }
    return kde;
}

Kde gaussian_prior(const std::vector<tok::Position>& target, std::size_t d_z) {
    Kde kde;
    kde.d_z = d_z;
    kde.positions = target;
    kde.centers.assign(target.size(), TensorF(0, d_z));
    kde.bandwidth.assign(target.size(), std::vector<double>(d_z, 1.0));
    kde.source.resize(target.size());
    return kde;
}

std::vector<TensorF> draw_samples(const Kde& kde, std::size_t k, Rng& rng, KdeKind kind) {
    require(k >= 1, ErrorKind::Argument, "draw_samples needs k >= 1");
    const bool joint = kind == KdeKind::Joint && kde.prompts > 0;
    std::vector<TensorF> out;
    out.reserve(k);
    for (std::size_t s = 0; s < k; ++s) {
        TensorF z(kde.size(), kde.d_z);
        const std::size_t anchor =
            joint ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(kde.prompts) - 1)) : 0;
        for (std::size_t n = 0; n < kde.size(); ++n) {
            const auto& c = kde.centers[n];
            std::optional<std::size_t> anchored;
            if (joint) {
                const auto& src = kde.source[n];
                const auto hit = std::lower_bound(src.begin(), src.end(), anchor);
                if (hit != src.end() && *hit == anchor) {
                    anchored = static_cast<std::size_t>(hit - src.begin());
                }
            }
            for (std::size_t j = 0; j < kde.d_z; ++j) {
                if (c.rows() == 0) {
                    z(n, j) = static_cast<float>(rng.normal(0.0, 1.0));
                    continue;
                }
                const auto pick = anchored ? *anchored : static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(c.rows()) - 1));
                z(n, j) = static_cast<float>(c(pick, j) + rng.normal(0.0, kde.bandwidth[n][j]));
            }
        }
        out.push_back(std::move(z));
    }
    return out;
}

std::vector<tok::Position> target_positions(const zoo::Architecture& arch, std::size_t d_t) {
    return tok::tokenize(zoo::empty_checkpoint(arch), d_t).positions;
}

ModelCheckpoint decode_sample(const SaneModel& sane, const TensorF& z, const zoo::Architecture& arch,
                              const tok::PreprocessState& prep, const DecodeOptions& opts) {
    const auto pos = target_positions(arch, prep.d_t);
    require(z.rows() == pos.size() && z.cols() == sane.config().d_z, ErrorKind::Dimension,
            fmt::format("sample has shape {}x{}, target needs {}x{}", z.rows(), z.cols(), pos.size(),
                        sane.config().d_z));
    const std::size_t chunk = opts.chunk ? opts.chunk : sane.config().ws;
    const TensorF tokens = embed::decode_sequence(sane, z, pos, chunk, opts.halo);
    ModelCheckpoint m = tok::destandardize(tok::detokenize_tokens(tokens, arch, prep.d_t), prep);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (arch.layers[i].kind == zoo::LayerKind::BatchNorm) {
            m.layers[i].buffers.mean.assign(arch.layers[i].out, 0.0F);
            m.layers[i].buffers.var.assign(arch.layers[i].out, 1.0F);
        }
    }
    m.validate();
    return m;
}

std::vector<ModelCheckpoint> decode_samples(const SaneModel& sane, const std::vector<TensorF>& zs,
                                            const zoo::Architecture& arch,
                                            const tok::PreprocessState& prep,
                                            const DecodeOptions& opts, std::size_t workers) {
    std::vector<ModelCheckpoint> out(zs.size());
    parallel_for(zs.size(), workers,
                 [&](std::size_t i) { out[i] = decode_sample(sane, zs[i], arch, prep, opts); });
    return out;
}

ModelCheckpoint bn_condition(const ModelCheckpoint& m, const zoo::Dataset& data,
                             std::size_t batches, std::size_t batch_size, std::uint64_t seed) {
    ModelCheckpoint out = m;
    if (!m.arch.has_batchnorm() || batches == 0) {
        return out;
    }
    require(data.size() > 0, ErrorKind::Data, "batch-norm conditioning needs input data");
    zoo::update_bn_statistics(out, data.inputs, batches, batch_size, seed, 0.0F);
    return out;
}

std::vector<Scored> subsample(const std::vector<double>& scores, std::size_t m) {
    std::vector<Scored> all;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        all.push_back({i, scores[i]});
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    all.resize(std::min(m, all.size()));
    return all;
}

SampleResult bootstrap(const SampleContext& ctx, const std::vector<const EmbeddingSequence*>& prompts,
                       const SampleConfig& cfg) {
    cfg.validate();
    require(ctx.sane && ctx.preprocess && ctx.select_data, ErrorKind::Argument,
            "sampling context is incomplete");
    const auto& sane = *ctx.sane;
    const auto target = target_positions(ctx.arch, ctx.preprocess->d_t);
    const DecodeOptions dec{cfg.chunk.value_or(sane.config().ws),
                            cfg.halo.value_or(embed::default_halo(sane))};
    const zoo::Dataset& bn_data = ctx.bn_data ? *ctx.bn_data : *ctx.select_data;

    Kde kde = cfg.prior == Prior::Kde ? fit_kde(prompts, target, cfg.bandwidth, cfg.fixed_h)
                                      : gaussian_prior(target, sane.config().d_z);
    SampleResult res;
    for (std::size_t it = 1; it <= cfg.bootstrap_iters; ++it) {
        Rng rng(derive_seed(cfg.seed, 100 + it));
        auto zs = draw_samples(kde, cfg.k, rng, cfg.kde);
        std::vector<ModelCheckpoint> models(zs.size());
        std::vector<double> scores(zs.size());
        parallel_for(zs.size(), ctx.workers, [&](std::size_t i) {
            try {
                auto m = decode_sample(sane, zs[i], ctx.arch, *ctx.preprocess, dec);
                m = bn_condition(m, bn_data, cfg.bn_batches, cfg.bn_batch_size,
                                 derive_seed(cfg.seed, 10000 * it + i));
                scores[i] = zoo::evaluate(m, *ctx.select_data).accuracy;
                models[i] = std::move(m);
            } catch (const Error& e) {
                fail(e.kind(), fmt::format("sampling iteration {}: {}", it, e.what()), e.key());
            }
        });
        IterationTrace tr;
        tr.iteration = it;
        tr.candidate_scores = scores;

        // candidates: kept models from the previous round first, then new draws
        std::vector<ModelCheckpoint> pool = std::move(res.models);
        std::vector<TensorF> pool_z = std::move(res.embeddings);
        std::vector<double> pool_scores = std::move(res.scores);
        for (std::size_t i = 0; i < zs.size(); ++i) {
            pool.push_back(std::move(models[i]));
            pool_z.push_back(std::move(zs[i]));
            pool_scores.push_back(scores[i]);
        }
        res.models.clear();
        res.embeddings.clear();
        res.scores.clear();
        for (const auto& s : subsample(pool_scores, cfg.m)) {
            res.models.push_back(std::move(pool[s.index]));
            res.embeddings.push_back(std::move(pool_z[s.index]));
            res.scores.push_back(s.score);
        }
        tr.kept_scores = res.scores;
        tr.best = res.scores.front();
        res.trace.push_back(std::move(tr));

        if (it < cfg.bootstrap_iters) {
            std::vector<EmbeddingSequence> elite(res.embeddings.size());
            std::vector<const EmbeddingSequence*> refs;
            for (std::size_t i = 0; i < elite.size(); ++i) {
                elite[i].z = res.embeddings[i];
                elite[i].positions = target;
                refs.push_back(&elite[i]);
            }
            kde = fit_kde(refs, target, cfg.bandwidth, cfg.fixed_h);
        }
    }
    return res;
}

Trajectory finetune(const ModelCheckpoint& m, const zoo::TaskData& data, std::size_t epochs,
                    const zoo::TrainOptions& opts, std::uint64_t seed) {
    Trajectory t;
    t.points.push_back({0, zoo::evaluate(m, data.test).accuracy});
    zoo::Trainer trainer(m, opts, seed);
    for (std::size_t e = 1; e <= epochs; ++e) {
        trainer.run_epoch(data.train);
        if (trainer.diverged()) {
            t.diverged = true;
            break;
        }
        t.points.push_back({e, zoo::evaluate(trainer.snapshot(), data.test).accuracy});
    }
    return t;
}

double ensemble_eval(const std::vector<ModelCheckpoint>& models, const zoo::Dataset& data) {
    require(models.size() >= 2, ErrorKind::Argument, "an ensemble needs at least 2 models");
    const std::size_t classes = models.front().arch.num_classes();
    for (const auto& m : models) {
        require(m.arch.num_classes() == classes, ErrorKind::Argument,
                "ensemble members disagree on the number of classes");
    }
    std::vector<double> probs(data.size() * classes, 0.0);
    for (const auto& m : models) {
        const TensorF lg = zoo::logits(m, data.inputs);
        for (std::size_t r = 0; r < data.size(); ++r) {
            const float* row = lg.row(r);
            const double top = *std::max_element(row, row + classes);
            double sum = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                sum += std::exp(double(row[c]) - top);
            }
            for (std::size_t c = 0; c < classes; ++c) {
                probs[r * classes + c] += std::exp(double(row[c]) - top) / sum;
            }
        }
    }
    std::size_t correct = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
        const double* row = probs.data() + r * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (row[c] > row[best]) {
                best = c;
            }
        }
        correct += static_cast<std::int64_t>(best) == data.labels[r] ? 1 : 0;
    }
    return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

nlohmann::json result_to_json(const SampleResult& r, const SampleConfig& cfg,
                              const std::vector<std::string>& paths) {
    nlohmann::json j;
    j["config"] = sample_config_to_json(cfg);
    j["seed"] = cfg.seed;
    j["iterations"] = nlohmann::json::array();
    for (const auto& t : r.trace) {
        j["iterations"].push_back({{"iteration", t.iteration},
                                   {"best", t.best},
                                   {"kept_scores", t.kept_scores},
                                   {"candidate_scores", t.candidate_scores}});
    }
    j["models"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        nlohmann::json e{{"rank", i}, {"val_accuracy", r.scores[i]}};
        if (i < paths.size()) {
            e["path"] = paths[i];
        }
        j["models"].push_back(e);
    }
    return j;
}

}  // namespace sane::sample
