// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "numerics/autodiff.hpp"
#include "numerics/optim.hpp"
#include "zoo/arch.hpp"
#include "zoo/task.hpp"

namespace sane::zoo {

using VarF = num::Var<float>;

/// Autodiff handles for a checkpoint's learnable tensors, indexed by layer
/// (null for batch-norm layers and for absent biases).
struct NetVars {
    std::vector<VarF> weight;
    std::vector<VarF> bias;

    std::vector<VarF> parameters() const;
};

NetVars make_vars(const ModelCheckpoint& m, bool trainable);
/// Copies variable values back into the checkpoint's tensors.
void store_vars(const NetVars& vars, ModelCheckpoint& m);

enum class BnMode {
    Running,      // normalize with running buffers
    Batch,        // normalize with batch statistics, buffers untouched
    BatchUpdate,  // normalize with batch statistics and update the buffers
};

constexpr float kBnEps = 1e-5F;
constexpr float kBnMomentum = 0.1F;

/// Logits for a batch of flattened inputs.
VarF forward(num::Tape<float>& tape, const Architecture& arch, const NetVars& vars,
             std::vector<LayerParams>& layers, const num::TensorF& inputs, BnMode mode,
             float momentum = kBnMomentum);

/// Inference logits with running BN statistics.
num::TensorF logits(const ModelCheckpoint& m, const num::TensorF& inputs);

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

/// Argmax ties resolve to the lowest class index.
std::int64_t argmax_row(const float* row, std::size_t n);

EvalResult evaluate(const ModelCheckpoint& m, const Dataset& data);

struct TrainOptions {
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::size_t batch_size = 32;
};

/// Minibatch AdamW trainer that keeps optimizer state across epochs.
class Trainer {
public:
    Trainer(ModelCheckpoint init, TrainOptions opts, std::uint64_t seed);

    /// One pass over the data in a seeded random order. Returns the mean loss;
    /// a non-finite loss marks the trainer diverged and stops further updates.
    double run_epoch(const Dataset& data);

    bool diverged() const { return diverged_; }
    std::size_t epochs_done() const { return epochs_; }
    ModelCheckpoint snapshot() const;

private:
    ModelCheckpoint model_;
    NetVars vars_;
    num::AdamW<float> opt_;
    TrainOptions opts_;
    std::uint64_t seed_;
    std::size_t epochs_ = 0;
    bool diverged_ = false;
};

/// Runs forward passes with batch statistics and folds them into the running
/// buffers. Learnable tensors are not touched. A momentum of 0 keeps a
/// cumulative average over the batches instead of an exponential one.
void update_bn_statistics(ModelCheckpoint& m, const num::TensorF& inputs, std::size_t batches,
                          std::size_t batch_size, std::uint64_t seed,
                          float momentum = kBnMomentum);

}  // namespace sane::zoo
