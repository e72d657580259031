// SPDX-License-Identifier: Apache-2.0

#include "zoo/network.hpp"

#include <cmath>
#include <numeric>

#include "common/rng.hpp"

namespace sane::zoo {

std::vector<VarF> NetVars::parameters() const {
    std::vector<VarF> out;
    for (std::size_t i = 0; i < weight.size(); ++i) {
        if (weight[i]) {
            out.push_back(weight[i]);
        }
        if (bias[i]) {
            out.push_back(bias[i]);
        }
    }
    return out;
}

NetVars make_vars(const ModelCheckpoint& m, bool trainable) {
    NetVars v;
    v.weight.resize(m.layers.size());
    v.bias.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& spec = m.arch.layers[i];
        if (!spec.learnable()) {
            continue;
        }
        // Both dense and conv weights are consumed as [out x row_width] matrices.
        TensorF w = m.layers[i].weight.reshaped({spec.out, spec.row_width()});
        TensorF b = spec.has_bias ? m.layers[i].bias.reshaped({1, spec.out}) : TensorF();
        v.weight[i] = trainable ? num::parameter(std::move(w)) : num::constant(std::move(w));
        if (spec.has_bias) {
            v.bias[i] = trainable ? num::parameter(std::move(b)) : num::constant(std::move(b));
        }
    }
    return v;
}

void store_vars(const NetVars& vars, ModelCheckpoint& m) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (vars.weight[i]) {
            auto& dst = m.layers[i].weight.storage();
            const auto& src = vars.weight[i]->value.storage();
            std::copy(src.begin(), src.end(), dst.begin());
        }
        if (vars.bias[i]) {
            auto& dst = m.layers[i].bias.storage();
            const auto& src = vars.bias[i]->value.storage();
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
}

VarF forward(num::Tape<float>& tape, const Architecture& arch, const NetVars& vars,
             std::vector<LayerParams>& layers, const num::TensorF& inputs, BnMode mode,
             float momentum) {
    if (inputs.cols() != arch.input_size()) {
        fail(ErrorKind::Dimension, fmt::format("input width {} does not match architecture input {}",
                                               inputs.cols(), arch.input_size()));
    }
    const auto learnable = arch.learnable_layers();
    const std::size_t last = learnable.back();
    const auto shapes = arch.layer_inputs();
    VarF x = num::constant(inputs);
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& spec = arch.layers[i];
        switch (spec.kind) {
            case LayerKind::Dense:
                x = tape.linear(x, vars.weight[i], vars.bias[i]);
                break;
            case LayerKind::Conv2d: {
                const auto& s = shapes[i];
                num::ConvGeometry g{s[0], s[1], s[2], spec.kernel_h, spec.kernel_w, spec.stride,
                                    spec.padding};
                x = tape.conv2d(x, vars.weight[i], vars.bias[i], g);
                break;
            }
            case LayerKind::BatchNorm: {
                auto& buf = layers[i].buffers;
                if (mode == BnMode::Running) {
                    x = tape.batch_norm_eval(x, spec.out, buf.mean, buf.var, kBnEps);
                } else {
                    std::vector<float> mean;
                    std::vector<float> var;
                    x = tape.batch_norm_train(x, spec.out, kBnEps, &mean, &var);
                    if (mode == BnMode::BatchUpdate) {
                        for (std::size_t c = 0; c < spec.out; ++c) {
                            buf.mean[c] = (1.0F - momentum) * buf.mean[c] + momentum * mean[c];
                            buf.var[c] = (1.0F - momentum) * buf.var[c] + momentum * var[c];
                        }
                    }
                }
                break;
            }
        }
        // ReLU after each hidden block, placed after the block's batch norm when present.
        const bool block_end =
            i + 1 >= arch.layers.size() || arch.layers[i + 1].kind != LayerKind::BatchNorm;
        const bool in_last_block = i >= last;
        if (block_end && !in_last_block) {
            x = tape.relu(x);
        }
    }
    return x;
}

num::TensorF logits(const ModelCheckpoint& m, const num::TensorF& inputs) {
    num::Tape<float> tape(false);
    NetVars vars = make_vars(m, false);
    std::vector<LayerParams> layers = m.layers;
    return forward(tape, m.arch, vars, layers, inputs, BnMode::Running)->value;
}

std::int64_t argmax_row(const float* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c) {
        if (row[c] > row[best]) {
            best = c;
        }
    }
    return static_cast<std::int64_t>(best);
}

EvalResult evaluate(const ModelCheckpoint& m, const Dataset& data) {
    if (data.size() == 0) {
        fail(ErrorKind::Argument, "evaluate: empty dataset");
    }
    const num::TensorF out = logits(m, data.inputs);
    const std::size_t classes = out.cols();
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const float* row = out.row(i);
        if (argmax_row(row, classes) == data.labels[i]) {
            ++correct;
        }
        double mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) {
            mx = std::max(mx, static_cast<double>(row[c]));
        }
        double total = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            total += std::exp(static_cast<double>(row[c]) - mx);
        }
        loss += mx + std::log(total) - static_cast<double>(row[data.labels[i]]);
    }
    return EvalResult{static_cast<double>(correct) / static_cast<double>(data.size()),
                      loss / static_cast<double>(data.size())};
}

Trainer::Trainer(ModelCheckpoint init, TrainOptions opts, std::uint64_t seed)
    : model_(std::move(init)),
      vars_(make_vars(model_, true)),
      opt_(vars_.parameters(), num::AdamWOptions{opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay}),
      opts_(opts),
      seed_(seed) {}

double Trainer::run_epoch(const Dataset& data) {
    if (diverged_) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    Rng rng(derive_seed(seed_, 1000 + epochs_));
    std::vector<std::size_t> order = rng.permutation(data.size());
    const std::size_t cols = data.inputs.cols();
    const std::size_t bs = std::max<std::size_t>(opts_.batch_size, 2);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t end = std::min(order.size(), start + bs);
        if (end - start < 2 && model_.arch.has_batchnorm()) {
            break;  // batch statistics need two samples
        }
        num::TensorF x(end - start, cols);
        std::vector<std::int64_t> y(end - start);
        for (std::size_t i = start; i < end; ++i) {
            std::copy_n(data.inputs.row(order[i]), cols, x.row(i - start));
            y[i - start] = data.labels[order[i]];
        }
        num::Tape<float> tape;
        VarF out = forward(tape, model_.arch, vars_, model_.layers, x, BnMode::BatchUpdate);
        VarF loss = tape.cross_entropy(out, y);
        const double l = num::item(loss);
        if (!std::isfinite(l)) {
            diverged_ = true;
            return l;
        }
        opt_.zero_grad();
        tape.backward(loss);
        opt_.step();
        total += l;
        ++batches;
    }
    ++epochs_;
    store_vars(vars_, model_);
    return batches ? total / static_cast<double>(batches) : 0.0;
}

ModelCheckpoint Trainer::snapshot() const {
    ModelCheckpoint m = model_;
    store_vars(vars_, m);
    m.meta.epoch = static_cast<std::int64_t>(epochs_);
    return m;
}

void update_bn_statistics(ModelCheckpoint& m, const num::TensorF& inputs, std::size_t batches,
                          std::size_t batch_size, std::uint64_t seed, float momentum) {
    if (!m.arch.has_batchnorm() || batches == 0) {
        return;
    }
    const std::size_t n = inputs.rows();
    const std::size_t cols = inputs.cols();
    const std::size_t bs = std::max<std::size_t>(2, std::min(batch_size, n));
    NetVars vars = make_vars(m, false);
    Rng rng(seed);
    for (std::size_t b = 0; b < batches; ++b) {
        num::TensorF x(bs, cols);
        for (std::size_t i = 0; i < bs; ++i) {
            const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
            std::copy_n(inputs.row(idx), cols, x.row(i));
        }
        num::Tape<float> tape(false);
        const float mom = momentum > 0.0F ? momentum : 1.0F / static_cast<float>(b + 1);
        forward(tape, m.arch, vars, m.layers, x, BnMode::BatchUpdate, mom);
    }
}

}  // namespace sane::zoo
