// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics/autodiff.hpp"
#include "numerics/tensor.hpp"

namespace sane::zoo {

using num::TensorF;

enum class LayerKind { Dense, Conv2d, BatchNorm };

const char* layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    std::size_t in = 0;   // input features or input channels; BN: channel count
    std::size_t out = 0;  // output features or output channels; BN: channel count
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool has_bias = true;

    bool learnable() const { return kind != LayerKind::BatchNorm; }
    /// Per-output-row parameter count of the 2-D view, bias column excluded.
    std::size_t row_width() const {
        return kind == LayerKind::Conv2d ? in * kernel_h * kernel_w : in;
    }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Ordered layer list plus input geometry. Input is either {features} or
/// {channels, height, width}. ReLU follows every learnable layer (after its
/// batch norm when one follows) except the last; conv outputs are flattened
/// in (channel, y, x) order when a dense layer follows.
struct Architecture {
    std::vector<std::size_t> input_shape;
    std::vector<LayerSpec> layers;

    std::size_t input_size() const;
    std::size_t num_classes() const;
    bool has_batchnorm() const;
    std::vector<std::size_t> learnable_layers() const;
    /// Geometry of the activation entering each layer, as {C,H,W} or {D}.
    std::vector<std::vector<std::size_t>> layer_inputs() const;
    num::ConvGeometry conv_geometry(std::size_t layer) const;

    /// Throws DimensionError on incompatible consecutive layers.
    void validate() const;

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

nlohmann::json arch_to_json(const Architecture& arch);
Architecture arch_from_json(const nlohmann::json& j);

/// MLP with the given hidden widths. No batch norm.
Architecture make_mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                      std::size_t classes);

struct CnnOptions {
    std::size_t in_channels = 1;
    std::size_t height = 8;
    std::size_t width = 8;
    std::vector<std::size_t> channels{8, 8};
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t padding = 1;
    bool batchnorm = true;
    std::size_t classes = 10;
};

/// Conv stack (each optionally followed by batch norm) with a dense head.
Architecture make_cnn(const CnnOptions& opts);

struct BnBuffers {
    std::vector<float> mean;
    std::vector<float> var;
};

/// Per-layer tensors. Dense weight is [out x in]; conv weight is
/// [out x in x kh x kw]; bias is [out]. Batch-norm layers carry only buffers.
struct LayerParams {
    TensorF weight;
    TensorF bias;
    BnBuffers buffers;
};

struct CheckpointMeta {
    std::int64_t model_id = -1;
    std::uint64_t seed = 0;
    std::int64_t epoch = 0;
};

struct ModelCheckpoint {
    Architecture arch;
    std::vector<LayerParams> layers;
    CheckpointMeta meta;

    /// Learnable parameter count (weights + biases).
    std::size_t num_parameters() const;
    /// 2-D [out x row_width (+1 with bias)] view of layer `i`; bias as last column.
    TensorF layer_matrix(std::size_t i) const;
    void set_layer_matrix(std::size_t i, const TensorF& matrix);
    /// Throws DimensionError when a tensor does not match the architecture.
    void validate() const;

    friend bool operator==(const ModelCheckpoint& a, const ModelCheckpoint& b);
};

/// Zero tensors of the right shapes; BN buffers at (mean 0, var 1).
ModelCheckpoint empty_checkpoint(const Architecture& arch);

/// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
ModelCheckpoint init_checkpoint(const Architecture& arch, std::uint64_t seed);

/// FNV-1a over learnable tensor bytes; BN buffers excluded.
std::uint64_t weights_hash(const ModelCheckpoint& m);

}  // namespace sane::zoo
