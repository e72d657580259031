// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics/autodiff.hpp"
#include "tokenizer/tokenizer.hpp"

namespace sane::model {

using num::Segment;
using num::TensorF;
using VarF = num::Var<float>;
using TapeF = num::Tape<float>;

struct SaneConfig {
    std::size_t d_t = 17;
    std::size_t d_z = 16;
    std::size_t d_model = 128;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t d_proj = 16;
    std::size_t ws = 16;
    double gamma = 0.05;
    double tau = 0.1;
    double sigma = 0.05;
    double lr_max = 1e-3;
    double weight_decay = 0.0;
    std::size_t epochs = 50;
    std::size_t patience = 10;
    std::size_t batch_size = 32;
    std::size_t permutation_pool = 5;
    std::uint64_t seed = 1;

    void validate() const;
};

nlohmann::json config_to_json(const SaneConfig& c);
/// Unknown keys are rejected with their key path.
SaneConfig config_from_json(const nlohmann::json& j, const std::string& path = "sane");

/// Position-table sizes; indices run 1..max inclusive.
struct Capacity {
    std::int64_t n = 0;
    std::int64_t l = 0;
    std::int64_t k = 0;
};

/// Twice the largest n, l and k seen in the given sequences.
Capacity capacity_for(const std::vector<const tok::TokenSequence*>& seqs);

class SaneModel {
public:
    SaneModel() = default;
    SaneModel(const SaneConfig& cfg, const Capacity& cap, std::uint64_t seed);

    const SaneConfig& config() const { return cfg_; }
    const Capacity& capacity() const { return cap_; }

    /// Packed windows: `tokens` rows are the concatenation of every segment.
    VarF encode(TapeF& tape, const VarF& tokens, const std::vector<tok::Position>& pos,
                const std::vector<Segment>& segs) const;
    VarF decode(TapeF& tape, const VarF& z, const std::vector<tok::Position>& pos,
                const std::vector<Segment>& segs) const;
    /// Mean-pooled latent per segment through the projection head.
    VarF project(TapeF& tape, const VarF& z, const std::vector<Segment>& segs) const;

    TensorF encode_window(const TensorF& tokens, const std::vector<tok::Position>& pos) const;
    TensorF decode_window(const TensorF& z, const std::vector<tok::Position>& pos) const;

    std::vector<VarF> parameters() const;
    /// Parameters feeding the reconstruction path only (projection head excluded).
    std::vector<VarF> autoencoder_parameters() const;
    std::size_t num_parameters() const;

    /// Deep copy of parameter values.
    SaneModel clone() const;
    void copy_values_from(const SaneModel& other);

    void save(const std::filesystem::path& dir, const nlohmann::json& extra_meta) const;
    static SaneModel load(const std::filesystem::path& dir, nlohmann::json* extra_meta = nullptr);

private:
    struct Linear {
        VarF w;
        VarF b;
    };
    struct Block {
        VarF ln1_g, ln1_b;
        Linear q, k, v, o;
        VarF ln2_g, ln2_b;
        Linear ff1, ff2;
    };

    VarF embed_positions(TapeF& tape, const std::vector<tok::Position>& pos) const;
    VarF block(TapeF& tape, const Block& b, const VarF& x, const std::vector<Segment>& segs) const;
    VarF apply(TapeF& tape, const Linear& l, const VarF& x) const { return tape.linear(x, l.w, l.b); }
    void for_each(const std::function<void(const std::string&, const VarF&)>& fn) const;

    SaneConfig cfg_;
    Capacity cap_;
    Linear in_proj_;
    VarF pos_n_, pos_l_, pos_k_;
    std::vector<Block> encoder_;
    VarF enc_ln_g_, enc_ln_b_;
    Linear down_, up_;
    std::vector<Block> decoder_;
    VarF dec_ln_g_, dec_ln_b_;
    Linear head_;
    Linear proj1_, proj2_;
};

/// Masked reconstruction loss.
VarF loss_reconstruction(TapeF& tape, const VarF& pred, const VarF& target, const VarF& mask);
/// NT-Xent over 2B rows: row i pairs with row i+B. Inputs are raw projections.
VarF nt_xent(TapeF& tape, const VarF& a, const VarF& b, double tau);

}  // namespace sane::model
