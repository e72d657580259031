// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include "model/sane_model.hpp"
#include "tokenizer/tokenizer.hpp"

namespace sane::embed {

using model::SaneModel;
using num::TensorF;

struct EmbeddingSequence {
    std::int64_t model_id = -1;
    std::int64_t epoch = 0;
    TensorF z;  // [N x d_z]
    std::vector<tok::Position> positions;

    std::size_t size() const { return positions.size(); }
};

/// Content range [begin, end) plus the encoded range [outer_begin, outer_end)
/// with the halo clipped at the sequence ends.
struct Chunk {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t outer_begin = 0;
    std::size_t outer_end = 0;
};

std::vector<Chunk> plan_chunks(std::size_t n, std::size_t chunk, std::size_t halo);

/// Halo size used when none is given: a quarter of the training window.
std::size_t default_halo(const SaneModel& m);

EmbeddingSequence embed_model(const SaneModel& m, const tok::TokenSequence& t, std::size_t chunk,
                              std::size_t halo);
/// Decodes a stitched embedding back to tokens with the same chunking rule.
TensorF decode_sequence(const SaneModel& m, const TensorF& z,
                        const std::vector<tok::Position>& pos, std::size_t chunk,
                        std::size_t halo);
/// Masked MSE of encode-then-decode through chunked inference.
double reconstruction_error(const SaneModel& m, const tok::TokenSequence& t, std::size_t chunk,
                            std::size_t halo);

/// Mean reconstruction error over `seqs` at each inference window (no halo).
/// A window of 0 stands for the whole sequence.
std::vector<double> window_curve(const SaneModel& m, const std::vector<const tok::TokenSequence*>& seqs,
                                 const std::vector<std::size_t>& windows, std::size_t workers = 1);

std::vector<double> aggregate_mean(const EmbeddingSequence& e);
/// One scalar per layer (index l-1): mean over dimensions of the population
/// std of that layer's tokens.
std::vector<double> layer_spread(const EmbeddingSequence& e);
/// Euclidean distances of every unordered token pair of layer `l` (1-based),
/// in (i, j > i) order.
std::vector<double> pairwise_distances(const EmbeddingSequence& e, std::int64_t l);

void save_embeddings(const std::vector<EmbeddingSequence>& es, const std::filesystem::path& dir);
std::vector<EmbeddingSequence> load_embeddings(const std::filesystem::path& dir);
/// model_id, epoch, zbar_0.., spread_1..
std::string embeddings_csv(const std::vector<EmbeddingSequence>& es);

}  // namespace sane::embed
