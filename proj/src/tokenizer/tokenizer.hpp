// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "common/rng.hpp"
#include "numerics/tensor.hpp"
#include "zoo/arch.hpp"

namespace sane::tok {

using num::TensorF;
using zoo::ModelCheckpoint;

/// 1-based [n, l, k]: global token index, learnable-layer index, index within the layer.
using Position = std::array<std::int64_t, 3>;

struct LayerLayout {
    std::size_t layer = 0;      // index into Architecture::layers
    std::size_t rows = 0;       // c_out
    std::size_t row_width = 0;  // c_r, bias column included
    std::size_t parts = 0;      // ceil(c_r / d_t)
    std::size_t pad = 0;        // parts * d_t - c_r

    std::size_t tokens() const { return rows * parts; }
    friend bool operator==(const LayerLayout&, const LayerLayout&) = default;
};

struct TokenSequence {
    std::size_t d_t = 0;
    TensorF tokens;  // [N x d_t]
    TensorF mask;    // [N x d_t], 1 on signal entries
    std::vector<Position> positions;
    std::vector<LayerLayout> layout;

    std::size_t size() const { return positions.size(); }
};

/// Per learnable layer affine constants. Layers are indexed like
/// Architecture::layers; batch-norm entries stay at (0, 1) and are unused.
struct PreprocessState {
    std::size_t d_t = 0;
    std::optional<std::int64_t> reference_id;
    std::vector<double> mean;
    std::vector<double> std;
};

constexpr double kStdFloor = 1e-8;

nlohmann::json preprocess_to_json(const PreprocessState& s);
PreprocessState preprocess_from_json(const nlohmann::json& j);

/// Population mean and std per layer over every weight and bias of `models`.
PreprocessState fit_preprocess(const std::vector<const ModelCheckpoint*>& models, std::size_t d_t);

ModelCheckpoint standardize(const ModelCheckpoint& m, const PreprocessState& s);
ModelCheckpoint destandardize(const ModelCheckpoint& m, const PreprocessState& s);

std::vector<LayerLayout> token_layout(const zoo::Architecture& arch, std::size_t d_t);
std::size_t token_count(const zoo::Architecture& arch, std::size_t d_t);

TokenSequence tokenize(const ModelCheckpoint& m, std::size_t d_t);
/// Writes the learnable tensors of `t` into `m`, keeping its buffers and meta.
void detokenize_into(const TokenSequence& t, ModelCheckpoint& m);
/// Fresh checkpoint with BN buffers at (0, 1).
ModelCheckpoint detokenize(const TokenSequence& t, const zoo::Architecture& arch);
/// Same as detokenize for bare token rows laid out like `arch` (pads ignored).
ModelCheckpoint detokenize_tokens(const TensorF& tokens, const zoo::Architecture& arch,
                                  std::size_t d_t);

struct Window {
    std::size_t start = 0;  // 0-based offset into the parent sequence
    TensorF tokens;
    TensorF mask;
    std::vector<Position> positions;

    std::size_t size() const { return positions.size(); }
};

Window slice_window(const TokenSequence& t, std::size_t start, std::size_t length);
/// Uniform start over all admissible offsets; sequences shorter than ws come back whole.
Window draw_window(const TokenSequence& t, std::size_t ws, Rng& rng);
std::size_t windows_per_model(std::size_t n, std::size_t ws);

}  // namespace sane::tok
