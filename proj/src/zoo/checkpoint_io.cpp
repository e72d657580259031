// SPDX-License-Identifier: Apache-2.0

#include "zoo/checkpoint_io.hpp"

namespace sane::zoo {

namespace {

std::string tensor_name(std::size_t layer, const char* what) {
    return fmt::format("layer{}.{}", layer, what);
}

}  // namespace

Container checkpoint_to_container(const ModelCheckpoint& m) {
    m.validate();
    Container c("checkpoint");
    c.meta() = {{"arch", arch_to_json(m.arch)},
                {"model_id", m.meta.model_id},
                {"seed", m.meta.seed},
                {"epoch", m.meta.epoch}};
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& p = m.layers[i];
        if (m.arch.layers[i].learnable()) {
            c.add(tensor_name(i, "weight"), p.weight);
            if (m.arch.layers[i].has_bias) {
                c.add(tensor_name(i, "bias"), p.bias);
            }
        } else {
            const std::size_t n = p.buffers.mean.size();
            c.add(tensor_name(i, "running_mean"), TensorF(num::Shape{n}, p.buffers.mean));
            c.add(tensor_name(i, "running_var"), TensorF(num::Shape{n}, p.buffers.var));
        }
    }
    return c;
}

ModelCheckpoint checkpoint_from_container(const Container& c) {
    if (c.kind() != "checkpoint") {
        fail(ErrorKind::Format, fmt::format("container kind '{}' is not a checkpoint", c.kind()));
    }
    const auto& meta = c.meta();
    if (!meta.contains("arch")) {
        fail(ErrorKind::Format, "checkpoint manifest has no architecture");
    }
    ModelCheckpoint m = empty_checkpoint(arch_from_json(meta.at("arch")));
    m.meta.model_id = meta.value("model_id", std::int64_t{-1});
    m.meta.seed = meta.value("seed", std::uint64_t{0});
    m.meta.epoch = meta.value("epoch", std::int64_t{0});
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& p = m.layers[i];
        const auto& spec = m.arch.layers[i];
        auto load_into = [&](TensorF& dst, const std::string& name) {
            TensorF t = c.get_f32(name);
            if (t.shape() != dst.shape()) {
                fail(ErrorKind::Format,
                     fmt::format("tensor '{}' has shape {}, architecture expects {}", name,
                                 num::shape_str(t.shape()), num::shape_str(dst.shape())),
                     name);
            }
            dst = std::move(t);
        };
        if (spec.learnable()) {
            load_into(p.weight, tensor_name(i, "weight"));
            if (spec.has_bias) {
                load_into(p.bias, tensor_name(i, "bias"));
            }
        } else {
            TensorF mean(num::Shape{spec.out});
            TensorF var(num::Shape{spec.out});
            load_into(mean, tensor_name(i, "running_mean"));
            load_into(var, tensor_name(i, "running_var"));
            p.buffers.mean.assign(mean.storage().begin(), mean.storage().end());
            p.buffers.var.assign(var.storage().begin(), var.storage().end());
        }
    }
    return m;
}

void save_checkpoint(const ModelCheckpoint& m, const std::filesystem::path& dir) {
    checkpoint_to_container(m).save(dir);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    return checkpoint_from_container(Container::load(dir));
}

}  // namespace sane::zoo
