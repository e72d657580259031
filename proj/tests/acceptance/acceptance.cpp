// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion.
//   sane_acceptance --configs DIR --cli PATH [--work DIR] [--only 1,4] [--workers N]

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <fmt/format.h>

#include "align/align.hpp"
#include "align/hungarian.hpp"
#include "analyze/probe.hpp"
#include "analyze/spectral.hpp"
#include "common/container.hpp"
#include "common/parallel.hpp"
#include "embed/embed.hpp"
#include "model/pretrain.hpp"
#include "pipeline/run_config.hpp"
#include "sample/sample.hpp"
#include "support/oracles.hpp"
#include "zoo/checkpoint_io.hpp"
#include "zoo/network.hpp"

using namespace sane;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr std::size_t kFuzzedCheckpoints = 100;
constexpr double kGradTol = 1e-4;
constexpr double kNtXentTol = 1e-6;
constexpr double kNtXentHand = 0.5514;  // -log(e / (e + 2)), rounded
constexpr std::size_t kPlantedMaxWidth = 8;
constexpr std::size_t kExhaustiveWidth = 6;
constexpr double kLogitTol = 1e-5;
constexpr double kAlignRatio = 0.7;
constexpr double kProbeAccMin = 0.6;
constexpr double kProbeBaselineSlack = 0.1;
constexpr double kProbeEpochMin = 0.8;
constexpr double kChanceFactor = 1.5;
constexpr double kFinetuneMargin = 0.05;
constexpr std::size_t kScratchSeeds = 5;
constexpr double kHaloBnMargin = 0.10;
constexpr std::size_t kBootstrapIters = 3;
constexpr double kEsdTol = 1e-8;
constexpr double kAlphaTrue = 3.0;
constexpr double kAlphaTol = 0.15;
constexpr std::size_t kParetoN = 10000;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Options {
    fs::path configs;
    fs::path cli;
    fs::path work;
    std::size_t workers = 1;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) {
    std::fprintf(stderr, "  .. %s\n", msg.c_str());
    std::fflush(stderr);
}

bool same_bytes(const num::TensorF& a, const num::TensorF& b) {
    return a.shape() == b.shape() &&
           (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

bool same_learnable_bytes(const zoo::ModelCheckpoint& a, const zoo::ModelCheckpoint& b) {
    if (!(a.arch == b.arch) || a.layers.size() != b.layers.size()) {
        return false;
    }
    for (std::size_t i : a.arch.learnable_layers()) {
        if (!same_bytes(a.layers[i].weight, b.layers[i].weight) ||
            !same_bytes(a.layers[i].bias, b.layers[i].bias)) {
            return false;
        }
    }
    return true;
}

bool same_float_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

// ---------------------------------------------------------------------------
// Desk runs shared between criteria.

struct Desk {
    pipeline::RunConfig cfg;
    zoo::Zoo raw;
    zoo::Zoo aligned;
    zoo::TaskData data;
    model::PretrainResult model;  // trained on the aligned zoo
    std::vector<embed::EmbeddingSequence> embeddings;  // one per aligned-zoo entry
};

model::PretrainOptions logged(const std::string& tag) {
    model::PretrainOptions o;
    o.on_epoch = [tag](const model::EpochLog& l) {
        progress(fmt::format("{} epoch {} train_rec {:.4f} val_rec {:.4f}", tag, l.epoch, l.train_rec,
                             l.val_rec));
    };
    return o;
}

std::unique_ptr<Desk> build_desk(const Options& opt, const std::string& name) {
    auto d = std::make_unique<Desk>();
    d->cfg = pipeline::load_run_config(opt.configs / (name + ".json"));
    const auto t0 = std::chrono::steady_clock::now();
    d->raw = zoo::train_zoo(d->cfg.zoo, opt.workers);
    progress(fmt::format("{}: {} checkpoints trained in {:.0f}s", name, d->raw.manifest.entries.size(),
                         seconds_since(t0)));
    d->aligned = d->raw;
    align::align_zoo(d->aligned, align::default_reference(d->aligned.manifest), d->cfg.align.max_sweeps,
                     opt.workers);
    d->data = zoo::generate_splits(d->cfg.zoo.task);
    d->model = model::pretrain(d->aligned, d->cfg.sane, logged(name + " aligned"));
    const auto& m = d->model.model;
    const auto& prep = d->model.preprocess;
    const std::size_t n = d->aligned.checkpoints.size();
    d->embeddings.resize(n);
    parallel_for(n, opt.workers, [&](std::size_t i) {
        const auto t = tok::tokenize(tok::standardize(d->aligned.checkpoints[i], prep), prep.d_t);
        d->embeddings[i] = embed::embed_model(m, t, m.config().ws, embed::default_halo(m));
        d->embeddings[i].model_id = d->aligned.manifest.entries[i].model_id;
        d->embeddings[i].epoch = d->aligned.manifest.entries[i].epoch;
    });
    progress(fmt::format("{}: pretrained and embedded in {:.0f}s", name, seconds_since(t0)));
    return d;
}

struct Desks {
    const Options& opt;
    std::unique_ptr<Desk> mlp;
    std::unique_ptr<Desk> cnn;

    Desk& get_mlp() {
        if (!mlp) {
            mlp = build_desk(opt, "desk_mlp");
        }
        return *mlp;
    }
    Desk& get_cnn() {
        if (!cnn) {
            cnn = build_desk(opt, "desk_cnn");
        }
        return *cnn;
    }
};

std::vector<const embed::EmbeddingSequence*> prompts_of(const Desk& d, zoo::Split split, std::int64_t epoch) {
    std::vector<const embed::EmbeddingSequence*> out;
    for (std::size_t i = 0; i < d.embeddings.size(); ++i) {
        const auto& e = d.aligned.manifest.entries[i];
        if (e.split == split && e.epoch == epoch) {
            out.push_back(&d.embeddings[i]);
        }
    }
    return out;
}

std::int64_t last_epoch(const Desk& d) {
    std::int64_t e = 0;
    for (const auto& x : d.aligned.manifest.entries) {
        e = std::max(e, x.epoch);
    }
    return e;
}

sample::SampleContext context_of(const Desk& d, std::size_t workers) {
    sample::SampleContext ctx;
    ctx.sane = &d.model.model;
    ctx.preprocess = &d.model.preprocess;
    ctx.arch = d.aligned.manifest.arch;
    ctx.select_data = &d.data.val;
    ctx.bn_data = &d.data.train;
    ctx.workers = workers;
    return ctx;
}

double mean_test_accuracy(const std::vector<zoo::ModelCheckpoint>& ms, const zoo::Dataset& test) {
    double s = 0.0;
    for (const auto& m : ms) {
        s += zoo::evaluate(m, test).accuracy;
    }
    return s / double(ms.size());
}

// ---------------------------------------------------------------------------
// 1. Exactness

zoo::Architecture random_arch(Rng& rng) {
    if (rng.uniform() < 0.5) {
        std::vector<std::size_t> hidden(static_cast<std::size_t>(rng.uniform_int(0, 3)));
        for (auto& h : hidden) {
            h = static_cast<std::size_t>(rng.uniform_int(1, 12));
        }
        return zoo::make_mlp(static_cast<std::size_t>(rng.uniform_int(1, 6)), hidden,
                             static_cast<std::size_t>(rng.uniform_int(2, 5)));
    }
    zoo::CnnOptions o;
    o.in_channels = static_cast<std::size_t>(rng.uniform_int(1, 3));
    o.height = static_cast<std::size_t>(rng.uniform_int(4, 9));
    o.width = static_cast<std::size_t>(rng.uniform_int(4, 9));
    o.channels.assign(static_cast<std::size_t>(rng.uniform_int(1, 2)), 0);
    for (auto& c : o.channels) {
        c = static_cast<std::size_t>(rng.uniform_int(1, 6));
    }
    o.kernel = rng.uniform() < 0.5 ? 1 : 3;
    o.stride = static_cast<std::size_t>(rng.uniform_int(1, 2));
    o.padding = o.kernel == 3 ? 1 : static_cast<std::size_t>(rng.uniform_int(0, 1));
    o.batchnorm = rng.uniform() < 0.5;
    o.classes = static_cast<std::size_t>(rng.uniform_int(2, 5));
    return zoo::make_cnn(o);
}

void fuzz_values(zoo::ModelCheckpoint& m, Rng& rng) {
    const float special[] = {-0.0F, 1e-40F, -1e-42F, FLT_MAX, -FLT_MIN, 1e30F, 3.0F};
    for (auto& p : m.layers) {
        for (auto* t : {&p.weight, &p.bias}) {
            for (auto& v : t->storage()) {
                if (rng.uniform() < 0.1) {
                    v = special[rng.uniform_int(0, 6)];
                } else {
                    v = static_cast<float>(rng.normal() * std::exp(rng.uniform(-8.0, 8.0)));
                }
            }
        }
        for (auto& v : p.buffers.mean) {
            v = rng.normal_f();
        }
        for (auto& v : p.buffers.var) {
            v = static_cast<float>(rng.uniform(0.1, 3.0));
        }
    }
}

Outcome criterion_exactness(const Options& opt) {
    Rng rng(20240101);
    std::size_t token_fail = 0;
    std::size_t container_fail = 0;
    const fs::path dir = opt.work / "c1";
    fs::remove_all(dir);
    for (std::size_t i = 0; i < kFuzzedCheckpoints; ++i) {
        const auto arch = random_arch(rng);
        const auto d_t = static_cast<std::size_t>(rng.uniform_int(1, 24));
        auto m = zoo::init_checkpoint(arch, rng.next());
        fuzz_values(m, rng);
        m.meta = {static_cast<std::int64_t>(i), rng.next(), rng.uniform_int(0, 50)};

        const auto t = tok::tokenize(m, d_t);
        const auto back = tok::detokenize(t, arch);
        auto into = m;
        for (auto& p : into.layers) {
            p.weight.fill(0.0F);
            p.bias.fill(0.0F);
        }
        tok::detokenize_into(t, into);
        if (!same_learnable_bytes(m, back) || !same_learnable_bytes(m, into)) {
            ++token_fail;
        }

        const auto path = dir / fmt::format("m{:03}", i);
        zoo::save_checkpoint(m, path);
        const auto loaded = zoo::load_checkpoint(path);
        bool ok = same_learnable_bytes(m, loaded) && loaded.meta.model_id == m.meta.model_id &&
                  loaded.meta.seed == m.meta.seed && loaded.meta.epoch == m.meta.epoch;
        for (std::size_t l = 0; ok && l < m.layers.size(); ++l) {
            ok = same_float_bits(m.layers[l].buffers.mean, loaded.layers[l].buffers.mean) &&
                 same_float_bits(m.layers[l].buffers.var, loaded.layers[l].buffers.var);
        }
        container_fail += ok ? 0 : 1;
    }

    // n_l = c_out * ceil(c_r / d_t) and mask sum = parameter count on the desk architectures.
    std::size_t identity_fail = 0;
    std::size_t identity_checks = 0;
    for (const char* name : {"desk_mlp", "desk_cnn"}) {
        const auto arch = pipeline::load_run_config(opt.configs / (std::string(name) + ".json")).zoo.arch;
        const auto m = zoo::init_checkpoint(arch, 3);
        for (std::size_t d_t = 1; d_t <= 80; ++d_t) {
            const auto layout = tok::token_layout(arch, d_t);
            const auto learn = arch.learnable_layers();
            std::size_t expected_total = 0;
            bool ok = layout.size() == learn.size();
            for (std::size_t k = 0; ok && k < learn.size(); ++k) {
                const auto& spec = arch.layers[learn[k]];
                const std::size_t c_r = spec.row_width() + (spec.has_bias ? 1 : 0);
                const std::size_t n_l = spec.out * ((c_r + d_t - 1) / d_t);
                ok = layout[k].tokens() == n_l;
                expected_total += n_l;
            }
            const auto t = tok::tokenize(m, d_t);
            double mask_sum = 0.0;
            for (float v : t.mask.storage()) {
                mask_sum += v;
            }
            ok = ok && t.size() == expected_total && tok::token_count(arch, d_t) == expected_total &&
                 mask_sum == double(m.num_parameters());
            identity_fail += ok ? 0 : 1;
            ++identity_checks;
        }
    }
    return {token_fail == 0 && container_fail == 0 && identity_fail == 0,
            fmt::format("token round-trip failures {}/{}, container failures {}/{}, "
                        "layout identity failures {}/{}",
                        token_fail, kFuzzedCheckpoints, container_fail, kFuzzedCheckpoints,
                        identity_fail, identity_checks)};
}

// ---------------------------------------------------------------------------
// 2. Numerics

Outcome criterion_numerics() {
    using testing::contract;
    using testing::gradient_error;
    using testing::random_tensor;
    using testing::VarD;
    using T = num::Tape<double>;
    using V = std::vector<VarD>;
    std::mt19937_64 rng(77);
    auto r = [&](num::Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(std::move(s), rng, lo, hi); };

    struct Check {
        std::string op;
        double err;
    };
    std::vector<Check> checks;
    auto add = [&](const std::string& op, const testing::GradFn& fn, std::vector<num::TensorD> in) {
        checks.push_back({op, gradient_error(fn, std::move(in))});
    };
    const auto a34 = r({3, 4});
    const auto b45 = r({4, 5});
    add("matmul", [](T& t, const V& v) { return contract(t, t.matmul(v[0], v[1]), 1); }, {a34, b45});
    add("matmul^T", [](T& t, const V& v) { return contract(t, t.matmul(v[0], v[1], true, true), 2); },
        {r({4, 3}), r({5, 4})});
    add("linear", [](T& t, const V& v) { return contract(t, t.linear(v[0], v[1], v[2]), 3); },
        {a34, r({5, 4}), r({1, 5})});
    add("add", [](T& t, const V& v) { return contract(t, t.add(v[0], v[1]), 4); }, {a34, r({3, 4})});
    add("add broadcast", [](T& t, const V& v) { return contract(t, t.add(v[0], v[1]), 5); }, {a34, r({1, 4})});
    add("sub", [](T& t, const V& v) { return contract(t, t.sub(v[0], v[1]), 6); }, {a34, r({3, 4})});
    add("mul", [](T& t, const V& v) { return contract(t, t.mul(v[0], v[1]), 7); }, {a34, r({3, 4})});
    add("scale", [](T& t, const V& v) { return contract(t, t.scale(v[0], -2.5), 8); }, {a34});
    add("relu", [](T& t, const V& v) { return contract(t, t.relu(v[0]), 9); }, {r({3, 4}, 0.05, 1.0)});
    add("gelu", [](T& t, const V& v) { return contract(t, t.gelu(v[0]), 10); }, {r({3, 4}, -3, 3)});
    add("softmax rows", [](T& t, const V& v) { return contract(t, t.softmax(v[0], 1), 11); }, {r({4, 5}, -2, 2)});
    add("softmax cols", [](T& t, const V& v) { return contract(t, t.softmax(v[0], 0), 12); }, {r({4, 5}, -2, 2)});
    add("layer_norm", [](T& t, const V& v) { return contract(t, t.layer_norm(v[0], v[1], v[2], 1e-5), 13); },
        {r({4, 5}), r({1, 5}), r({1, 5})});
    add("transpose", [](T& t, const V& v) { return contract(t, t.transpose(v[0]), 14); }, {a34});
    add("concat_rows", [](T& t, const V& v) { return contract(t, t.concat_rows({v[0], v[1], v[0]}), 15); },
        {a34, r({2, 4})});
    add("gather_rows", [](T& t, const V& v) { return contract(t, t.gather_rows(v[0], {2, 0, 2, 1}), 16); }, {a34});
    add("sum", [](T& t, const V& v) { return t.sum(t.mul(v[0], v[0])); }, {a34});
    add("mean", [](T& t, const V& v) { return t.mean(t.mul(v[0], v[0])); }, {a34});
    const std::vector<num::Segment> segs{{0, 3}, {3, 4}};
    add("attention", [&](T& t, const V& v) { return contract(t, t.attention(v[0], v[1], v[2], 2, segs), 17); },
        {r({7, 8}), r({7, 8}), r({7, 8})});
    add("segment_mean", [](T& t, const V& v) { return contract(t, t.segment_mean(v[0], {{0, 2}, {2, 1}}), 18); },
        {a34});
    add("l2_normalize_rows", [](T& t, const V& v) { return contract(t, t.l2_normalize_rows(v[0]), 19); }, {a34});
    num::TensorD mask(3, 4);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = i % 3 == 0 ? 0.0 : 1.0;
    }
    add("mse_masked", [&](T& t, const V& v) { return t.mse_masked(v[0], v[1], num::constant(mask)); },
        {a34, r({3, 4})});
    add("cross_entropy", [](T& t, const V& v) { return t.cross_entropy(v[0], {0, 3, 1, 1}); }, {r({4, 4}, -2, 2)});
    add("cross_entropy no-diag", [](T& t, const V& v) { return t.cross_entropy(v[0], {2, 3, 0, 1}, true); },
        {r({4, 4}, -2, 2)});
    const num::ConvGeometry g{2, 5, 4, 3, 3, 2, 1};
    add("conv2d", [&](T& t, const V& v) { return contract(t, t.conv2d(v[0], v[1], v[2], g), 20); },
        {r({3, 40}), r({3, 18}), r({1, 3})});
    add("batch_norm_train", [](T& t, const V& v) { return contract(t, t.batch_norm_train(v[0], 3, 1e-5), 21); },
        {r({4, 6})});
    add("batch_norm_eval", [](T& t, const V& v) {
            return contract(t, t.batch_norm_eval(v[0], 3, {0.1, -0.2, 0.3}, {1.5, 0.5, 2.0}, 1e-5), 22);
        }, {r({4, 6})});

    double worst = 0.0;
    std::string worst_op;
    std::size_t failed = 0;
    for (const auto& c : checks) {
        if (!(c.err < kGradTol)) {
            ++failed;
        }
        if (!(c.err <= worst)) {
            worst = c.err;
            worst_op = c.op;
        }
    }

    // NT-Xent against the scalar loop and the hand case.
    double nt_worst = 0.0;
    Rng nr(5);
    for (std::size_t n : {2, 3, 8, 16}) {
        for (std::size_t d : {2, 5, 16}) {
            num::TensorF a(n, d);
            num::TensorF b(n, d);
            for (auto* t : {&a, &b}) {
                for (auto& v : t->storage()) {
                    v = nr.normal_f();
                }
            }
            for (double tau : {0.1, 0.5, 1.0}) {
                num::Tape<float> tape(false);
                const double got = num::item(model::nt_xent(tape, num::constant(a), num::constant(b), tau));
                const double want = testing::nt_xent_oracle(a, b, tau);
                nt_worst = std::max(nt_worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
            }
        }
    }
    num::Tape<float> tape(false);
    const auto eye = num::TensorF::matrix(2, 2, {1, 0, 0, 1});
    const double hand = num::item(model::nt_xent(tape, num::constant(eye), num::constant(eye), 1.0));
    const double hand_exact = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    const bool hand_ok = std::abs(hand - hand_exact) < kNtXentTol && std::abs(hand - kNtXentHand) < 5e-5;

    return {failed == 0 && nt_worst < kNtXentTol && hand_ok,
            fmt::format("{} ops, {} above {:g} (worst {} {:.2e}); NT-Xent vs oracle {:.2e} (tol {:g}); "
                        "hand case {:.6f} vs {:.6f}",
                        checks.size(), failed, kGradTol, worst_op, worst, nt_worst, kNtXentTol, hand,
                        hand_exact)};
}

// ---------------------------------------------------------------------------
// 3. Alignment

Outcome criterion_alignment() {
    Rng rng(31);
    std::size_t planted = 0;
    std::size_t planted_fail = 0;
    for (std::size_t w = 1; w <= kPlantedMaxWidth; ++w) {
        for (std::size_t depth = 1; depth <= 3; ++depth) {
            for (int trial = 0; trial < 4; ++trial) {
                const auto arch = zoo::make_mlp(3, std::vector<std::size_t>(depth, w), 2);
                const auto a = zoo::init_checkpoint(arch, rng.next());
                align::Permutations pi;
                for (std::size_t bw : align::boundary_widths(arch)) {
                    pi.push_back(rng.permutation(bw));
                }
                const auto r = align::weight_matching(a, align::apply_permutation(a, pi));
                planted_fail += r.perms == align::invert(pi) ? 0 : 1;
                ++planted;
            }
        }
    }

    std::size_t exhaustive = 0;
    std::size_t exhaustive_fail = 0;
    for (std::size_t w = 1; w <= kExhaustiveWidth; ++w) {
        for (int trial = 0; trial < 5; ++trial) {
            const auto arch = zoo::make_mlp(3, {w}, 2);
            const auto x = zoo::init_checkpoint(arch, rng.next());
            const auto y = zoo::init_checkpoint(arch, rng.next());
            const auto r = align::weight_matching(x, y);
            std::vector<std::size_t> p(w);
            std::iota(p.begin(), p.end(), 0);
            double best = INFINITY;
            do {
                best = std::min(best, align::squared_distance(x, align::apply_permutation(y, {p})));
            } while (std::next_permutation(p.begin(), p.end()));
            exhaustive_fail += std::abs(r.residual - best) <= 1e-12 * std::max(1.0, best) ? 0 : 1;
            ++exhaustive;
        }
    }

    double worst_logit = 0.0;
    const auto data = zoo::generate_task(zoo::TaskSpec{}, 256);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> hidden(static_cast<std::size_t>(rng.uniform_int(1, 3)));
        for (auto& h : hidden) {
            h = static_cast<std::size_t>(rng.uniform_int(2, 16));
        }
        const auto arch = zoo::make_mlp(2, hidden, 2);
        const auto m = zoo::init_checkpoint(arch, rng.next());
        align::Permutations pi;
        for (std::size_t bw : align::boundary_widths(arch)) {
            pi.push_back(rng.permutation(bw));
        }
        const auto a = zoo::logits(m, data.inputs);
        const auto b = zoo::logits(align::apply_permutation(m, pi), data.inputs);
        for (std::size_t i = 0; i < a.size(); ++i) {
            worst_logit = std::max(worst_logit, double(std::abs(a[i] - b[i])));
        }
    }

    return {planted_fail == 0 && exhaustive_fail == 0 && worst_logit < kLogitTol,
            fmt::format("planted recovery {}/{} exact (width <= {}), exhaustive optimum {}/{} "
                        "(width <= {}), max logit deviation {:.2e} (tol {:g})",
                        planted - planted_fail, planted, kPlantedMaxWidth, exhaustive - exhaustive_fail,
                        exhaustive, kExhaustiveWidth, worst_logit, kLogitTol)};
}

// ---------------------------------------------------------------------------
// 4. Alignment ablation

Outcome criterion_alignment_ablation(Desks& desks) {
    auto& d = desks.get_mlp();
    const auto unaligned = model::pretrain(d.raw, d.cfg.sane, logged("desk_mlp unaligned"));
    const double a = d.model.log.at(d.model.best_epoch - 1).val_rec;
    const double u = unaligned.log.at(unaligned.best_epoch - 1).val_rec;
    const double ratio = a / u;
    return {ratio <= kAlignRatio,
            fmt::format("val L_rec aligned {:.5f} (epoch {}) / unaligned {:.5f} (epoch {}) = {:.4f} "
                        "(threshold <= {:g})",
                        a, d.model.best_epoch, u, unaligned.best_epoch, ratio, kAlignRatio)};
}

// ---------------------------------------------------------------------------
// 5. Probes

Outcome criterion_probes(Desks& desks) {
    auto& d = desks.get_mlp();
    auto run = [&](analyze::Target target, bool sane_features) {
        analyze::ProbeData train;
        analyze::ProbeData test;
        for (std::size_t i = 0; i < d.embeddings.size(); ++i) {
            const auto& e = d.aligned.manifest.entries[i];
            analyze::ProbeData* dst = e.split == zoo::Split::Train  ? &train
                                      : e.split == zoo::Split::Test ? &test
                                                                    : nullptr;
            if (!dst) {
                continue;
            }
            dst->model_ids.push_back(e.model_id);
            dst->features.push_back(sane_features ? embed::aggregate_mean(d.embeddings[i])
                                                  : analyze::weight_statistics(d.aligned.checkpoints[i]));
            dst->targets.push_back(analyze::target_value(e, target));
        }
        const auto r = analyze::linear_probe(train, test);
        return r.ok ? r.r2 : std::nan("");
    };
    const double acc_sane = run(analyze::Target::Acc, true);
    const double acc_stats = run(analyze::Target::Acc, false);
    const double ep_sane = run(analyze::Target::Ep, true);
    const bool pass = acc_sane >= kProbeAccMin && acc_sane >= acc_stats - kProbeBaselineSlack &&
                      ep_sane >= kProbeEpochMin;
    return {pass, fmt::format("R2 acc: sane {:.4f} (>= {:g}), s(W) {:.4f} (sane >= s(W) - {:g}); "
                              "R2 epoch: sane {:.4f} (>= {:g})",
                              acc_sane, kProbeAccMin, acc_stats, kProbeBaselineSlack, ep_sane, kProbeEpochMin)};
}

// ---------------------------------------------------------------------------
// 6. Window-size curve

Outcome criterion_window_curve(Desks& desks, const Options& opt) {
    bool pass = true;
    std::string detail;
    for (auto* d : {&desks.get_mlp(), &desks.get_cnn()}) {
        const auto& m = d->model.model;
        const auto& prep = d->model.preprocess;
        std::vector<tok::TokenSequence> held;
        for (std::size_t i = 0; i < d->aligned.checkpoints.size(); ++i) {
            if (d->aligned.manifest.entries[i].split == zoo::Split::Test) {
                held.push_back(tok::tokenize(tok::standardize(d->aligned.checkpoints[i], prep), prep.d_t));
            }
        }
        std::vector<const tok::TokenSequence*> ptrs;
        for (const auto& t : held) {
            ptrs.push_back(&t);
        }
        const std::size_t ws = m.config().ws;
        const std::vector<std::size_t> windows{std::max<std::size_t>(1, ws / 4), ws, 4 * ws, 0};
        const auto curve = embed::window_curve(m, ptrs, windows, opt.workers);
        const auto best = static_cast<std::size_t>(std::min_element(curve.begin(), curve.end()) - curve.begin());
        // index 1 is the training window; its neighbours are ws/4 and 4*ws
        const bool ok = best <= 2;
        pass = pass && ok;
        detail += fmt::format("{}{} (N={}): ws/4 {:.5f}, ws {:.5f}, 4ws {:.5f}, full {:.5f}, min at {}",
                              detail.empty() ? "" : "; ", d->cfg.zoo.arch.has_batchnorm() ? "cnn" : "mlp",
                              held.empty() ? 0 : held.front().size(), curve[0], curve[1], curve[2], curve[3],
                              best == 3 ? std::string("full") : fmt::format("{}", windows[best]));
    }
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 7. Sampling

Outcome criterion_sampling(Desks& desks, const Options& opt) {
    auto& d = desks.get_mlp();
    auto cfg = d.cfg.sample;
    cfg.bootstrap_iters = 1;
    const auto prompts = prompts_of(d, zoo::Split::Train, last_epoch(d));
    const auto res = sample::bootstrap(context_of(d, opt.workers), prompts, cfg);
    const double chance = 1.0 / double(d.aligned.manifest.arch.num_classes());
    const double zero_shot = mean_test_accuracy(res.models, d.data.test);

    std::vector<double> sampled_ep1(res.models.size());
    std::vector<double> scratch_ep1(kScratchSeeds);
    parallel_for(res.models.size() + kScratchSeeds, opt.workers, [&](std::size_t i) {
        if (i < res.models.size()) {
            sampled_ep1[i] = sample::finetune(res.models[i], d.data, 1, d.cfg.zoo.train,
                                              derive_seed(cfg.seed, 300 + i)).points.at(1).accuracy;
        } else {
            const std::size_t k = i - res.models.size();
            const auto init = zoo::init_checkpoint(d.aligned.manifest.arch, derive_seed(cfg.seed, 500 + k));
            scratch_ep1[k] = sample::finetune(init, d.data, 1, d.cfg.zoo.train, derive_seed(cfg.seed, 700 + k))
                                 .points.at(1).accuracy;
        }
    });
    const double s1 = std::accumulate(sampled_ep1.begin(), sampled_ep1.end(), 0.0) / double(sampled_ep1.size());
    const double c1 = std::accumulate(scratch_ep1.begin(), scratch_ep1.end(), 0.0) / double(scratch_ep1.size());
    const bool pass = zero_shot >= kChanceFactor * chance && s1 >= c1 + kFinetuneMargin;
    return {pass, fmt::format("{} prompts, k={} m={}: zero-shot {:.4f} (>= {:.4f}); after 1 epoch "
                              "sampled {:.4f} vs scratch {:.4f} over {} seeds (margin >= {:g})",
                              prompts.size(), cfg.k, cfg.m, zero_shot, kChanceFactor * chance, s1, c1,
                              kScratchSeeds, kFinetuneMargin)};
}

// ---------------------------------------------------------------------------
// 8. Halo and BN conditioning

Outcome criterion_halo_bn(Desks& desks, const Options& opt) {
    auto& d = desks.get_cnn();
    const auto prompts = prompts_of(d, zoo::Split::Train, last_epoch(d));
    const auto ctx = context_of(d, opt.workers);
    auto full = d.cfg.sample;
    full.bootstrap_iters = 1;
    full.halo = embed::default_halo(d.model.model);
    auto naive = full;
    naive.halo = 0;
    naive.bn_batches = 0;
    const double acc_full = mean_test_accuracy(sample::bootstrap(ctx, prompts, full).models, d.data.test);
    const double acc_naive = mean_test_accuracy(sample::bootstrap(ctx, prompts, naive).models, d.data.test);
    return {acc_full >= acc_naive + kHaloBnMargin,
            fmt::format("zero-shot haloed (h={}) + BN-conditioned {:.4f} vs naive {:.4f} (margin >= {:g})",
                        *full.halo, acc_full, acc_naive, kHaloBnMargin)};
}

// ---------------------------------------------------------------------------
// 9. Bootstrap invariant

Outcome criterion_bootstrap(Desks& desks, const Options& opt) {
    auto& d = desks.get_mlp();
    const auto prompts = prompts_of(d, zoo::Split::Train, last_epoch(d));
    const auto ctx = context_of(d, opt.workers);
    std::string detail;
    bool pass = true;
    for (auto prior : {sample::Prior::Kde, sample::Prior::Gaussian}) {
        auto cfg = d.cfg.sample;
        cfg.prior = prior;
        cfg.bootstrap_iters = kBootstrapIters;
        const auto r = sample::bootstrap(ctx, prompts, cfg);
        bool mono = r.trace.size() == kBootstrapIters;
        std::string bests;
        for (std::size_t i = 0; i < r.trace.size(); ++i) {
            mono = mono && (i == 0 || r.trace[i].best >= r.trace[i - 1].best);
            bests += fmt::format("{}{:.4f}", i ? " " : "", r.trace[i].best);
        }
        pass = pass && mono;
        detail += fmt::format("{} elite best [{}] {}; ", prior == sample::Prior::Kde ? "kde" : "gaussian", bests,
                              mono ? "non-decreasing" : "DECREASED");
    }

    // bootstrap_iters = 1 against subsample run by hand with the same seed.
    auto cfg = d.cfg.sample;
    cfg.prior = sample::Prior::Kde;
    cfg.bootstrap_iters = 1;
    const auto r = sample::bootstrap(ctx, prompts, cfg);
    const auto& m = d.model.model;
    const auto target = sample::target_positions(ctx.arch, d.model.preprocess.d_t);
    Rng rng(derive_seed(cfg.seed, 101));
    const auto zs = sample::draw_samples(sample::fit_kde(prompts, target, cfg.bandwidth, cfg.fixed_h), cfg.k, rng);
    std::vector<double> scores(zs.size());
    std::vector<zoo::ModelCheckpoint> ms(zs.size());
    for (std::size_t i = 0; i < zs.size(); ++i) {
        ms[i] = sample::decode_sample(m, zs[i], ctx.arch, d.model.preprocess,
                                      {cfg.chunk.value_or(m.config().ws), cfg.halo.value_or(embed::default_halo(m))});
        ms[i] = sample::bn_condition(ms[i], d.data.train, cfg.bn_batches, cfg.bn_batch_size,
                                     derive_seed(cfg.seed, 10000 + i));
        scores[i] = zoo::evaluate(ms[i], d.data.val).accuracy;
    }
    const auto keep = sample::subsample(scores, cfg.m);
    bool same = keep.size() == r.models.size();
    for (std::size_t i = 0; same && i < keep.size(); ++i) {
        same = r.models[i] == ms[keep[i].index] && r.scores[i] == keep[i].score;
    }
    pass = pass && same;
    detail += fmt::format("iters=1 {} subsample", same ? "identical to" : "DIFFERS from");
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 10. Spectral suite

Outcome criterion_spectral() {
    Rng rng(9);
    double esd_worst = 0.0;
    for (auto [r, c] : {std::pair<std::size_t, std::size_t>{20, 50}, {50, 20}, {7, 7}, {1, 9}, {16, 17}}) {
        analyze::MatrixD w(r, c);
        Eigen::MatrixXd e(r, c);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                w(i, j) = rng.normal();
                e(Eigen::Index(i), Eigen::Index(j)) = w(i, j);
            }
        }
        const auto got = analyze::esd(w);
        const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
        if (got.size() != std::size_t(sv.size())) {
            esd_worst = INFINITY;
            continue;
        }
        for (std::size_t i = 0; i < got.size(); ++i) {
            const double want = sv[Eigen::Index(i)] * sv[Eigen::Index(i)];
            esd_worst = std::max(esd_worst, std::abs(got[i] - want) / std::max(want, 1e-300));
        }
    }

    std::vector<double> x(kParetoN);
    for (auto& v : x) {
        v = std::pow(1.0 - rng.uniform(), -1.0 / (kAlphaTrue - 1.0));
    }
    const auto fit = analyze::power_law_fit(x);
    const bool alpha_ok = fit.ok && std::abs(fit.alpha - kAlphaTrue) <= kAlphaTol;

    bool norm_ok = true;
    for (const auto& diag : std::vector<std::vector<double>>{{3, 1}, {1, 1, 1}, {0.5, 2, 7, 0.1}, {10}}) {
        analyze::MatrixD w(diag.size(), diag.size());
        double top = 0.0;
        for (std::size_t i = 0; i < diag.size(); ++i) {
            w(i, i) = diag[i];
            top = std::max(top, diag[i]);
        }
        norm_ok = norm_ok && analyze::log_spectral_norm(w) == std::log10(top * top);
    }

    std::size_t stat_fail = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto m = zoo::init_checkpoint(random_arch(rng), rng.next());
        const auto s = analyze::weight_statistics(m);
        std::size_t k = 0;
        for (std::size_t l : m.arch.learnable_layers()) {
            std::vector<double> v(m.layers[l].weight.storage().begin(), m.layers[l].weight.storage().end());
            v.insert(v.end(), m.layers[l].bias.storage().begin(), m.layers[l].bias.storage().end());
            std::sort(v.begin(), v.end());
            for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
                const double pos = q * double(v.size() - 1);
                const auto lo = static_cast<std::size_t>(pos);
                const double frac = pos - double(lo);
                const double want = lo + 1 < v.size() ? v[lo] + frac * (v[lo + 1] - v[lo]) : v[lo];
                stat_fail += s.at(k + 2 + std::size_t(q * 4)) == want ? 0 : 1;
            }
            k += 7;
        }
    }
    return {esd_worst < kEsdTol && alpha_ok && norm_ok && stat_fail == 0,
            fmt::format("ESD vs SVD rel err {:.2e} (< {:g}); Pareto alpha {:.4f} (true {:g} +- {:g}, "
                        "x_min {:.3f}, tail {}); diagonal log norms {}; s(W) percentile mismatches {}",
                        esd_worst, kEsdTol, fit.alpha, kAlphaTrue, kAlphaTol, fit.x_min, fit.n_tail,
                        norm_ok ? "exact" : "WRONG", stat_fail)};
}

// ---------------------------------------------------------------------------
// 11. End-to-end determinism through the CLI

int run_cli(const Options& opt, const std::vector<std::string>& args) {
    std::string cmd = "\"" + opt.cli.string() + "\"";
    for (const auto& a : args) {
        cmd += " \"" + a + "\"";
    }
    cmd += " --quiet";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome criterion_determinism(const Options& opt) {
    const std::string config = (opt.configs / "smoke.json").string();
    auto pipeline_into = [&](const fs::path& root, std::size_t workers) -> std::string {
        const std::string w = std::to_string(workers);
        auto p = [&](const char* s) { return (root / s).string(); };
        const std::vector<std::vector<std::string>> steps{
            {"zoo-gen", "--out", p("zoo")},
            {"align", "--zoo", p("zoo"), "--out", p("align")},
            {"pretrain", "--zoo", p("align"), "--out", p("pretrain")},
            {"embed", "--model", p("pretrain"), "--zoo", p("align"), "--out", p("embed")},
            {"probe", "--zoo", p("align"), "--embeddings", p("embed"), "--out", p("probe")},
            {"analyze", "--zoo", p("align"), "--embeddings", p("embed"), "--plots", "--out", p("analyze")},
            {"sample", "--model", p("pretrain"), "--zoo", p("align"), "--embeddings", p("embed"), "--out",
             p("sample")},
            {"finetune", "--samples", p("sample"), "--zoo", p("align"), "--out", p("finetune")},
            {"report", "--run", p("zoo"), "--run", p("align"), "--run", p("pretrain"), "--run", p("embed"),
             "--run", p("probe"), "--run", p("analyze"), "--run", p("sample"), "--run", p("finetune"),
             "--plots", "--out", p("report")},
        };
        for (auto step : steps) {
            step.insert(step.begin() + 1, {"--config", config, "--workers", w});
            if (const int rc = run_cli(opt, step); rc != 0) {
                return fmt::format("{} exited with {}", step.front(), rc);
            }
        }
        return {};
    };
    auto files_under = [](const fs::path& root) {
        std::set<std::string> out;
        for (const auto& e : fs::recursive_directory_iterator(root)) {
            if (e.is_regular_file()) {
                out.insert(fs::relative(e.path(), root).generic_string());
            }
        }
        return out;
    };
    ::unsetenv("SANE_CACHE_DIR");
    const fs::path a = opt.work / "c11" / "a";
    const fs::path b = opt.work / "c11" / "b";
    fs::remove_all(opt.work / "c11");
    if (auto err = pipeline_into(a, 1); !err.empty()) {
        return {false, "first run: " + err};
    }
    if (auto err = pipeline_into(b, 2); !err.empty()) {
        return {false, "second run: " + err};
    }
    const auto fa = files_under(a);
    const auto fb = files_under(b);
    std::size_t reports = 0;
    std::vector<std::string> differing;
    for (const auto& f : fa) {
        if (!fb.count(f) || read_text(a / f) != read_text(b / f)) {
            differing.push_back(f);
        }
        reports += f.size() > 12 && f.compare(f.size() - 12, 12, "_report.json") == 0 ? 1 : 0;
    }
    const bool pass = fa == fb && differing.empty() && reports == 9;
    return {pass, fmt::format("{} files ({} stage reports) compared between a 1-worker and a 2-worker run; "
                              "{} differ{}",
                              fa.size(), reports, differing.size(),
                              differing.empty() ? "" : " (first: " + differing.front() + ")")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria runner"};
    Options opt;
    std::vector<int> only;
    app.add_option("--configs", opt.configs, "Directory with desk_mlp.json, desk_cnn.json, smoke.json")
        ->required()
        ->check(CLI::ExistingDirectory);
    app.add_option("--cli", opt.cli, "Path to the sane executable")->required()->check(CLI::ExistingFile);
    app.add_option("--work", opt.work, "Scratch directory");
    app.add_option("--workers", opt.workers, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 11));
    CLI11_PARSE(app, argc, argv);
    if (opt.work.empty()) {
        opt.work = fs::temp_directory_path() / "sane_acceptance";
    }
    fs::create_directories(opt.work);

    Desks desks{opt, nullptr, nullptr};
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"exactness", [&] { return criterion_exactness(opt); }},
        {"numerics", [&] { return criterion_numerics(); }},
        {"alignment", [&] { return criterion_alignment(); }},
        {"alignment ablation", [&] { return criterion_alignment_ablation(desks); }},
        {"probes", [&] { return criterion_probes(desks); }},
        {"window-size curve", [&] { return criterion_window_curve(desks, opt); }},
        {"sampling", [&] { return criterion_sampling(desks, opt); }},
        {"halo + BN conditioning", [&] { return criterion_halo_bn(desks, opt); }},
        {"bootstrap invariant", [&] { return criterion_bootstrap(desks, opt); }},
        {"spectral", [&] { return criterion_spectral(); }},
        {"end-to-end determinism", [&] { return criterion_determinism(opt); }},
    };
    std::size_t failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) {
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, fmt::format("threw: {}", e.what())};
        }
        failed += o.pass ? 0 : 1;
        std::printf("criterion %2d %s  %s: %s [%.0fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
