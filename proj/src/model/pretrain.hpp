// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "model/sane_model.hpp"
#include "tokenizer/tokenizer.hpp"
#include "zoo/zoo.hpp"

namespace sane::model {

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double lr = 0.0;        // learning rate at the last step of the epoch
    double train_rec = 0.0;
    double train_con = 0.0;
    double val_rec = 0.0;
    double val_con = 0.0;
};

std::string log_to_csv(const std::vector<EpochLog>& log);

/// Standardized token sequences of a zoo split plus their permuted views.
struct SequenceSet {
    std::vector<std::int64_t> model_ids;
    std::vector<std::int64_t> epochs;
    std::vector<tok::TokenSequence> canonical;
    std::vector<std::vector<tok::TokenSequence>> permuted;
};

/// `pool` random permutations drawn once and applied to every entry.
SequenceSet build_sequences(const zoo::Zoo& zoo, zoo::Split split, const tok::PreprocessState& prep,
                            std::size_t pool, std::uint64_t seed);

/// Adds N(0, sigma^2) to signal entries only.
void add_noise(TensorF& tokens, const TensorF& mask, double sigma, Rng& rng);

/// Window starts that cover [0, n) with full-length windows (the last one may overlap).
std::vector<std::size_t> tile_starts(std::size_t n, std::size_t ws);

struct PretrainOptions {
    bool contrastive = true;  // false: L_c is logged but left out of the loss
    std::function<void(const EpochLog&)> on_epoch;
};

struct PretrainResult {
    SaneModel model;  // best-validation weights
    tok::PreprocessState preprocess;
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
};

/// Windowed pretraining with an aligned and a permuted view per window,
/// OneCycle schedule and early stopping on the validation loss.
PretrainResult pretrain(const zoo::Zoo& zoo, const SaneConfig& cfg,
                        const PretrainOptions& opts = {});

/// Validation losses on fixed tiled windows; the contrastive term uses the
/// first permuted view of every sequence.
struct ValLoss {
    double rec = 0.0;
    double con = 0.0;
};
ValLoss validation_loss(const SaneModel& m, const SequenceSet& val);

}  // namespace sane::model
