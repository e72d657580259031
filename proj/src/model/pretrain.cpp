// SPDX-License-Identifier: Apache-2.0

#include "model/pretrain.hpp"

#include <cmath>

#include <fmt/format.h>

#include "align/align.hpp"
#include "numerics/optim.hpp"

namespace sane::model {

std::string log_to_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,lr,train_rec,train_con,val_rec,val_con\n";
    for (const auto& e : log) {
        out += fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", e.epoch, e.lr, e.train_rec,
                           e.train_con, e.val_rec, e.val_con);
    }
    return out;
}

SequenceSet build_sequences(const zoo::Zoo& zoo, zoo::Split split, const tok::PreprocessState& prep,
                            std::size_t pool, std::uint64_t seed) {
    SequenceSet s;
    std::vector<align::Permutations> shared(pool);
    Rng rng(seed);
    for (auto& perms : shared) {
        for (std::size_t w : align::boundary_widths(zoo.manifest.arch)) {
            perms.push_back(rng.permutation(w));
        }
    }
    for (std::size_t e = 0; e < zoo.manifest.entries.size(); ++e) {
        const auto& entry = zoo.manifest.entries[e];
        if (entry.split != split) {
            continue;
        }
        const auto std_model = tok::standardize(zoo.checkpoints[e], prep);
        s.model_ids.push_back(entry.model_id);
        s.epochs.push_back(entry.epoch);
        s.canonical.push_back(tok::tokenize(std_model, prep.d_t));
        std::vector<tok::TokenSequence> views;
        for (const auto& perms : shared) {
            views.push_back(tok::tokenize(align::apply_permutation(std_model, perms), prep.d_t));
        }
        s.permuted.push_back(std::move(views));
    }
    return s;
}

void add_noise(TensorF& tokens, const TensorF& mask, double sigma, Rng& rng) {
    if (sigma == 0.0) {
        return;
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (mask[i] != 0.0F) {
            tokens[i] += static_cast<float>(rng.normal(0.0, sigma));
        }
    }
}

std::vector<std::size_t> tile_starts(std::size_t n, std::size_t ws) {
    std::vector<std::size_t> out;
    if (n <= ws) {
        out.push_back(0);
        return out;
    }
    for (std::size_t s = 0; s + ws < n; s += ws) {
        out.push_back(s);
    }
    out.push_back(n - ws);
    return out;
}

namespace {

struct Packed {
    TensorF input;
    TensorF target;
    TensorF mask;
    std::vector<tok::Position> pos;
    std::vector<Segment> segs;
};

void append(Packed& p, const tok::Window& w, const TensorF* noisy) {
    const std::size_t d = w.tokens.cols();
    const std::size_t old_rows = p.pos.size();
    auto grow = [&](TensorF& t, const TensorF& src) {
        t.storage().insert(t.storage().end(), src.storage().begin(), src.storage().end());
    };
    grow(p.input, noisy ? *noisy : w.tokens);
    grow(p.target, w.tokens);
    grow(p.mask, w.mask);
    p.pos.insert(p.pos.end(), w.positions.begin(), w.positions.end());
    p.segs.push_back({old_rows, w.size()});
    (void)d;
}

void finalize(Packed& p, std::size_t d) {
    const std::size_t rows = p.pos.size();
    p.input = TensorF(num::Shape{rows, d}, std::move(p.input.storage()));
    p.target = TensorF(num::Shape{rows, d}, std::move(p.target.storage()));
    p.mask = TensorF(num::Shape{rows, d}, std::move(p.mask.storage()));
}

struct StepLoss {
    VarF total;
    double rec = 0.0;
    double con = 0.0;
};

// Both views share one packed forward pass: segments [0, B) are view A and
// [B, 2B) view B.
StepLoss step_loss(TapeF& tape, const SaneModel& m, const Packed& p, std::size_t batch,
                   bool contrastive) {
    const auto& cfg = m.config();
    auto z = m.encode(tape, num::constant(p.input), p.pos, p.segs);
    auto rec = m.decode(tape, z, p.pos, p.segs);
    auto l_rec = loss_reconstruction(tape, rec, num::constant(p.target), num::constant(p.mask));
    std::vector<Segment> sa(p.segs.begin(), p.segs.begin() + static_cast<std::ptrdiff_t>(batch));
    std::vector<Segment> sb(p.segs.begin() + static_cast<std::ptrdiff_t>(batch), p.segs.end());
    auto pa = m.project(tape, z, sa);
    auto pb = m.project(tape, z, sb);
    auto l_con = nt_xent(tape, pa, pb, cfg.tau);
    StepLoss out;
    out.rec = num::item(l_rec);
    out.con = num::item(l_con);
    auto weighted_rec = tape.scale(l_rec, static_cast<float>(1.0 - cfg.gamma));
    out.total = contrastive
                    ? tape.add(weighted_rec, tape.scale(l_con, static_cast<float>(cfg.gamma)))
                    : weighted_rec;
    return out;
}

}  // namespace

ValLoss validation_loss(const SaneModel& m, const SequenceSet& val) {
    const auto& cfg = m.config();
    struct Item {
        std::size_t seq;
        std::size_t start;
    };
    std::vector<Item> items;
    for (std::size_t s = 0; s < val.canonical.size(); ++s) {
        for (std::size_t st : tile_starts(val.canonical[s].size(), cfg.ws)) {
            items.push_back({s, st});
        }
    }
    double rec_sum = 0.0;
    double mask_sum = 0.0;
    double con_sum = 0.0;
    std::size_t con_batches = 0;
    for (std::size_t b = 0; b < items.size(); b += cfg.batch_size) {
        const std::size_t e = std::min(items.size(), b + cfg.batch_size);
        Packed pk;
        Packed pv;
        for (std::size_t i = b; i < e; ++i) {
            const auto& seq = val.canonical[items[i].seq];
            const std::size_t len = std::min(cfg.ws, seq.size());
            append(pk, tok::slice_window(seq, items[i].start, len), nullptr);
            append(pv, tok::slice_window(val.permuted[items[i].seq].front(), items[i].start, len),
                   nullptr);
        }
        // view B rows follow view A rows
        const std::size_t offset = pk.pos.size();
        for (auto seg : pv.segs) {
            pk.segs.push_back({seg.offset + offset, seg.length});
        }
        pk.input.storage().insert(pk.input.storage().end(), pv.input.storage().begin(),
                                  pv.input.storage().end());
        pk.target.storage().insert(pk.target.storage().end(), pv.target.storage().begin(),
                                   pv.target.storage().end());
        pk.mask.storage().insert(pk.mask.storage().end(), pv.mask.storage().begin(),
                                 pv.mask.storage().end());
        pk.pos.insert(pk.pos.end(), pv.pos.begin(), pv.pos.end());
        finalize(pk, cfg.d_t);

        TapeF tape(false);
        const std::size_t nb = e - b;
        auto z = m.encode(tape, num::constant(pk.input), pk.pos, pk.segs);
        auto rec = m.decode(tape, z, pk.pos, pk.segs);
        // reconstruction is scored on the canonical view only
        const std::size_t rows = offset;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cfg.d_t; ++c) {
                const float mk = pk.mask(r, c);
                const double d = double(rec->value(r, c)) - double(pk.target(r, c));
                rec_sum += mk * d * d;
                mask_sum += mk;
            }
        }
        if (nb >= 2) {
            std::vector<Segment> sa(pk.segs.begin(), pk.segs.begin() + static_cast<std::ptrdiff_t>(nb));
            std::vector<Segment> sb(pk.segs.begin() + static_cast<std::ptrdiff_t>(nb), pk.segs.end());
            con_sum += num::item(nt_xent(tape, m.project(tape, z, sa), m.project(tape, z, sb), cfg.tau));
            ++con_batches;
        }
    }
    ValLoss v;
    v.rec = mask_sum > 0 ? rec_sum / mask_sum : 0.0;
    v.con = con_batches > 0 ? con_sum / double(con_batches) : 0.0;
    return v;
}

PretrainResult pretrain(const zoo::Zoo& zoo, const SaneConfig& cfg, const PretrainOptions& opts) {
    cfg.validate();
    std::vector<const zoo::ModelCheckpoint*> train_models;
    for (std::size_t e = 0; e < zoo.manifest.entries.size(); ++e) {
        if (zoo.manifest.entries[e].split == zoo::Split::Train) {
            train_models.push_back(&zoo.checkpoints[e]);
        }
    }
    require(train_models.size() >= 2, ErrorKind::Data, "pretraining needs at least 2 training checkpoints");
    PretrainResult res;
    res.preprocess = tok::fit_preprocess(train_models, cfg.d_t);
    res.preprocess.reference_id = zoo.manifest.reference_id;

    const SequenceSet train = build_sequences(zoo, zoo::Split::Train, res.preprocess,
                                              cfg.permutation_pool, derive_seed(cfg.seed, 2));
    const SequenceSet val = build_sequences(zoo, zoo::Split::Val, res.preprocess, 1,
                                            derive_seed(cfg.seed, 3));
    require(!val.canonical.empty(), ErrorKind::Data, "pretraining needs validation checkpoints");

    std::vector<const tok::TokenSequence*> all;
    for (const auto& s : train.canonical) {
        all.push_back(&s);
    }
    for (const auto& s : val.canonical) {
        all.push_back(&s);
    }
    SaneModel model(cfg, capacity_for(all), derive_seed(cfg.seed, 1));
    SaneModel best = model.clone();

    // k windows per model per epoch
    std::vector<std::size_t> draws;
    for (std::size_t s = 0; s < train.canonical.size(); ++s) {
        const std::size_t k = tok::windows_per_model(train.canonical[s].size(), cfg.ws);
        for (std::size_t i = 0; i < k; ++i) {
            draws.push_back(s);
        }
    }
    const std::size_t steps_per_epoch = (draws.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    num::OneCycleOptions sched;
    sched.lr_max = cfg.lr_max;
    num::AdamW<float> opt(model.parameters(),
                          num::AdamWOptions{cfg.lr_max, 0.9, 0.999, 1e-8, cfg.weight_decay});

    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 1000 + epoch));
        auto order = draws;
        rng.shuffle(order);
        double rec_sum = 0.0;
        double con_sum = 0.0;
        std::size_t batches = 0;
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            const std::size_t nb = e - b;
            if (nb < 2) {
                continue;  // a lone window has no negatives
            }
            Packed pk;
            std::vector<tok::Window> second;
            std::vector<TensorF> second_noisy;
            for (std::size_t i = b; i < e; ++i) {
                const std::size_t s = order[i];
                const auto& seq = train.canonical[s];
                auto w = tok::draw_window(seq, cfg.ws, rng);
                const auto pick = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(train.permuted[s].size()) - 1));
                auto v = tok::slice_window(train.permuted[s][pick], w.start, w.size());
                TensorF nw = w.tokens;
                add_noise(nw, w.mask, cfg.sigma, rng);
                TensorF nv = v.tokens;
                add_noise(nv, v.mask, cfg.sigma, rng);
                append(pk, w, &nw);
                second.push_back(std::move(v));
                second_noisy.push_back(std::move(nv));
            }
            for (std::size_t i = 0; i < second.size(); ++i) {
                append(pk, second[i], &second_noisy[i]);
            }
            finalize(pk, cfg.d_t);

            const double lr = num::onecycle_lr(step, total_steps, sched);
            opt.set_lr(lr);
            log.lr = lr;
            TapeF tape;
            auto loss = step_loss(tape, model, pk, nb, opts.contrastive);
            if (!std::isfinite(num::item(loss.total))) {
                std::vector<std::int64_t> ids;
                for (std::size_t i = b; i < e; ++i) {
                    ids.push_back(train.model_ids[order[i]]);
                }
                fail(ErrorKind::Numeric,
                     fmt::format("non-finite loss at epoch {} batch {} (models {})", epoch,
                                 batches, fmt::join(ids, ",")));
            }
            opt.zero_grad();
            tape.backward(loss.total);
            opt.step();
            ++step;
            rec_sum += loss.rec;
            con_sum += loss.con;
            ++batches;
        }
        log.train_rec = batches ? rec_sum / double(batches) : 0.0;
        log.train_con = batches ? con_sum / double(batches) : 0.0;
        const ValLoss v = validation_loss(model, val);
        log.val_rec = v.rec;
        log.val_con = v.con;
        res.log.push_back(log);
        if (opts.on_epoch) {
            opts.on_epoch(log);
        }
        const double combined = (opts.contrastive ? (1.0 - cfg.gamma) * v.rec + cfg.gamma * v.con
                                                  : v.rec);
        if (combined < best_val) {
            best_val = combined;
            best.copy_values_from(model);
            res.best_epoch = epoch;
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            break;
        }
    }
    res.model = std::move(best);
    res.best_val = best_val;
    return res;
}

}  // namespace sane::model
