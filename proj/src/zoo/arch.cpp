// SPDX-License-Identifier: Apache-2.0

#include "zoo/arch.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace sane::zoo {

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense:
            return "dense";
        case LayerKind::Conv2d:
            return "conv2d";
        case LayerKind::BatchNorm:
            return "batchnorm";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
    if (name == "dense") {
        return LayerKind::Dense;
    }
    if (name == "conv2d") {
        return LayerKind::Conv2d;
    }
    if (name == "batchnorm") {
        return LayerKind::BatchNorm;
    }
    fail(ErrorKind::Format, fmt::format("unknown layer kind '{}'", name));
}

std::size_t Architecture::input_size() const { return num::shape_size(input_shape); }

std::size_t Architecture::num_classes() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
        if (it->learnable()) {
            return it->out;
        }
    }
    return 0;
}

bool Architecture::has_batchnorm() const {
    for (const auto& l : layers) {
        if (l.kind == LayerKind::BatchNorm) {
            return true;
        }
    }
    return false;
}

std::vector<std::size_t> Architecture::learnable_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].learnable()) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<std::vector<std::size_t>> Architecture::layer_inputs() const {
    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> cur = input_shape;
    for (const auto& l : layers) {
        shapes.push_back(cur);
        switch (l.kind) {
            case LayerKind::Dense:
                cur = {l.out};
                break;
            case LayerKind::Conv2d: {
                if (cur.size() != 3) {
                    fail(ErrorKind::Dimension, "conv2d layer needs a {C,H,W} input");
                }
                num::ConvGeometry g{cur[0], cur[1], cur[2], l.kernel_h, l.kernel_w, l.stride,
                                    l.padding};
                cur = {l.out, g.out_height(), g.out_width()};
                break;
            }
            case LayerKind::BatchNorm:
                break;
        }
    }
    return shapes;
}

num::ConvGeometry Architecture::conv_geometry(std::size_t layer) const {
    const auto shapes = layer_inputs();
    const auto& s = shapes.at(layer);
    const auto& l = layers.at(layer);
    return num::ConvGeometry{s[0], s[1], s[2], l.kernel_h, l.kernel_w, l.stride, l.padding};
}

void Architecture::validate() const {
    if (input_shape.empty() || input_size() == 0) {
        fail(ErrorKind::Dimension, "architecture has no input geometry");
    }
    if (learnable_layers().empty()) {
        fail(ErrorKind::Argument, "architecture has no learnable layers");
    }
    std::vector<std::size_t> cur = input_shape;
    std::size_t last_out = 0;
    bool have_prev = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        switch (l.kind) {
            case LayerKind::Dense:
                if (l.in != num::shape_size(cur)) {
                    fail(ErrorKind::Dimension,
                         fmt::format("layer {}: dense input {} does not match incoming {}", i, l.in,
                                     num::shape_size(cur)));
                }
                cur = {l.out};
                break;
            case LayerKind::Conv2d: {
                if (cur.size() != 3 || cur[0] != l.in) {
                    fail(ErrorKind::Dimension,
                         fmt::format("layer {}: conv input channels do not match", i));
                }
                if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0 ||
                    cur[1] + 2 * l.padding < l.kernel_h || cur[2] + 2 * l.padding < l.kernel_w) {
                    fail(ErrorKind::Dimension, fmt::format("layer {}: invalid conv geometry", i));
                }
                num::ConvGeometry g{cur[0], cur[1], cur[2], l.kernel_h, l.kernel_w, l.stride,
                                    l.padding};
                cur = {l.out, g.out_height(), g.out_width()};
                break;
            }
            case LayerKind::BatchNorm:
                if (!have_prev || l.in != last_out || l.out != l.in) {
                    fail(ErrorKind::Dimension,
                         fmt::format("layer {}: batchnorm extent must equal preceding output", i));
                }
                break;
        }
        if (l.learnable()) {
            last_out = l.out;
            have_prev = true;
        }
    }
}

nlohmann::json arch_to_json(const Architecture& arch) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : arch.layers) {
        nlohmann::json j{{"kind", layer_kind_name(l.kind)}, {"in", l.in}, {"out", l.out}};
        if (l.kind == LayerKind::Conv2d) {
            j["kernel"] = {l.kernel_h, l.kernel_w};
            j["stride"] = l.stride;
            j["padding"] = l.padding;
        }
        if (l.learnable()) {
            j["bias"] = l.has_bias;
        }
        layers.push_back(j);
    }
    return {{"input", arch.input_shape}, {"layers", layers}};
}

Architecture arch_from_json(const nlohmann::json& j) {
    try {
        Architecture a;
        a.input_shape = j.at("input").get<std::vector<std::size_t>>();
        for (const auto& lj : j.at("layers")) {
            LayerSpec l;
            l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
            l.in = lj.at("in").get<std::size_t>();
            l.out = lj.at("out").get<std::size_t>();
            if (l.kind == LayerKind::Conv2d) {
                const auto k = lj.at("kernel").get<std::vector<std::size_t>>();
                if (k.size() != 2) {
                    fail(ErrorKind::Format, "conv kernel must have two extents");
                }
                l.kernel_h = k[0];
                l.kernel_w = k[1];
                l.stride = lj.value("stride", std::size_t{1});
                l.padding = lj.value("padding", std::size_t{0});
            }
            l.has_bias = l.learnable() && lj.value("bias", true);
            a.layers.push_back(l);
        }
        a.validate();
        return a;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("malformed architecture: {}", e.what()));
    }
}

Architecture make_mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                      std::size_t classes) {
    Architecture a;
    a.input_shape = {inputs};
    std::size_t prev = inputs;
    for (std::size_t h : hidden) {
        a.layers.push_back(LayerSpec{LayerKind::Dense, prev, h});
        prev = h;
    }
    a.layers.push_back(LayerSpec{LayerKind::Dense, prev, classes});
    a.validate();
    return a;
}

Architecture make_cnn(const CnnOptions& o) {
    Architecture a;
    a.input_shape = {o.in_channels, o.height, o.width};
    std::size_t c = o.in_channels;
    std::size_t h = o.height;
    std::size_t w = o.width;
    for (std::size_t ch : o.channels) {
        LayerSpec conv{LayerKind::Conv2d, c, ch, o.kernel, o.kernel, o.stride, o.padding, true};
        a.layers.push_back(conv);
        if (o.batchnorm) {
            a.layers.push_back(LayerSpec{LayerKind::BatchNorm, ch, ch, 0, 0, 1, 0, false});
        }
        h = (h + 2 * o.padding - o.kernel) / o.stride + 1;
        w = (w + 2 * o.padding - o.kernel) / o.stride + 1;
        c = ch;
    }
    a.layers.push_back(LayerSpec{LayerKind::Dense, c * h * w, o.classes});
    a.validate();
    return a;
}

std::size_t ModelCheckpoint::num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

TensorF ModelCheckpoint::layer_matrix(std::size_t i) const {
    const auto& spec = arch.layers.at(i);
    const auto& p = layers.at(i);
    const std::size_t rw = spec.row_width();
    const std::size_t cols = rw + (spec.has_bias ? 1 : 0);
    TensorF m(spec.out, cols);
    for (std::size_t r = 0; r < spec.out; ++r) {
        std::copy_n(p.weight.data() + r * rw, rw, m.row(r));
        if (spec.has_bias) {
            m(r, rw) = p.bias[r];
        }
    }
    return m;
}

void ModelCheckpoint::set_layer_matrix(std::size_t i, const TensorF& matrix) {
    const auto& spec = arch.layers.at(i);
    auto& p = layers.at(i);
    const std::size_t rw = spec.row_width();
    const std::size_t cols = rw + (spec.has_bias ? 1 : 0);
    if (matrix.rows() != spec.out || matrix.cols() != cols) {
        fail(ErrorKind::Dimension, fmt::format("layer {}: matrix {} does not match layer", i,
                                               num::shape_str(matrix.shape())));
    }
    for (std::size_t r = 0; r < spec.out; ++r) {
        std::copy_n(matrix.row(r), rw, p.weight.data() + r * rw);
        if (spec.has_bias) {
            p.bias[r] = matrix(r, rw);
        }
    }
}

void ModelCheckpoint::validate() const {
    arch.validate();
    if (layers.size() != arch.layers.size()) {
        fail(ErrorKind::Dimension, "checkpoint layer count does not match architecture");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& s = arch.layers[i];
        const auto& p = layers[i];
        if (s.learnable()) {
            if (p.weight.size() != s.out * s.row_width()) {
                fail(ErrorKind::Dimension, fmt::format("layer {}: weight has wrong size", i));
            }
            if (p.bias.size() != (s.has_bias ? s.out : 0)) {
                fail(ErrorKind::Dimension, fmt::format("layer {}: bias has wrong size", i));
            }
        } else if (p.buffers.mean.size() != s.out || p.buffers.var.size() != s.out) {
            fail(ErrorKind::Dimension, fmt::format("layer {}: batchnorm buffers missing", i));
        }
    }
}

bool operator==(const ModelCheckpoint& a, const ModelCheckpoint& b) {
    if (!(a.arch == b.arch) || a.layers.size() != b.layers.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& x = a.layers[i];
        const auto& y = b.layers[i];
        if (!(x.weight == y.weight) || !(x.bias == y.bias) || x.buffers.mean != y.buffers.mean ||
            x.buffers.var != y.buffers.var) {
            return false;
        }
    }
    return true;
}

ModelCheckpoint empty_checkpoint(const Architecture& arch) {
    arch.validate();
    ModelCheckpoint m;
    m.arch = arch;
    for (const auto& s : arch.layers) {
        LayerParams p;
        if (s.kind == LayerKind::Dense) {
            p.weight = TensorF(s.out, s.in);
        } else if (s.kind == LayerKind::Conv2d) {
            p.weight = TensorF(num::Shape{s.out, s.in, s.kernel_h, s.kernel_w});
        } else {
            p.buffers.mean.assign(s.out, 0.0F);
            p.buffers.var.assign(s.out, 1.0F);
        }
        if (s.learnable() && s.has_bias) {
            p.bias = TensorF(num::Shape{s.out});
        }
        m.layers.push_back(std::move(p));
    }
    return m;
}

ModelCheckpoint init_checkpoint(const Architecture& arch, std::uint64_t seed) {
    ModelCheckpoint m = empty_checkpoint(arch);
    m.meta.seed = seed;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& s = arch.layers[i];
        if (!s.learnable()) {
            continue;
        }
        const float bound = 1.0F / std::sqrt(static_cast<float>(s.row_width()));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (auto& v : m.layers[i].weight.storage()) {
            v = dist(rng);
        }
        for (auto& v : m.layers[i].bias.storage()) {
            v = dist(rng);
        }
    }
    return m;
}

std::uint64_t weights_hash(const ModelCheckpoint& m) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const TensorF& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& l : m.layers) {
        mix(l.weight);
        mix(l.bias);
    }
    return h;
}

}  // namespace sane::zoo
