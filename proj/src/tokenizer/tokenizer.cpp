// SPDX-License-Identifier: Apache-2.0

#include "tokenizer/tokenizer.hpp"

#include <cmath>

#include <fmt/format.h>

namespace sane::tok {

namespace {

void check_state(const ModelCheckpoint& m, const PreprocessState& s) {
    if (s.mean.size() != m.arch.layers.size() || s.std.size() != m.arch.layers.size()) {
        fail(ErrorKind::Config,
             fmt::format("preprocess state covers {} layers, model has {}", s.mean.size(),
                         m.arch.layers.size()),
             "preprocess");
    }
}

template <typename F>
ModelCheckpoint map_learnable(const ModelCheckpoint& m, const PreprocessState& s, F f) {
    check_state(m, s);
    ModelCheckpoint out = m;
    for (std::size_t i = 0; i < m.arch.layers.size(); ++i) {
        if (!m.arch.layers[i].learnable()) {
            continue;
        }
        const double mu = s.mean[i];
        const double sd = std::max(s.std[i], kStdFloor);
        for (auto& v : out.layers[i].weight.storage()) {
            v = static_cast<float>(f(double(v), mu, sd));
        }
        for (auto& v : out.layers[i].bias.storage()) {
            v = static_cast<float>(f(double(v), mu, sd));
        }
    }
    return out;
}

}  // namespace

nlohmann::json preprocess_to_json(const PreprocessState& s) {
    nlohmann::json j;
    j["d_t"] = s.d_t;
    j["reference_id"] = s.reference_id ? nlohmann::json(*s.reference_id) : nlohmann::json(nullptr);
    j["mean"] = s.mean;
    j["std"] = s.std;
    return j;
}

PreprocessState preprocess_from_json(const nlohmann::json& j) {
    PreprocessState s;
    try {
        s.d_t = j.at("d_t").get<std::size_t>();
        if (!j.at("reference_id").is_null()) {
            s.reference_id = j.at("reference_id").get<std::int64_t>();
        }
        s.mean = j.at("mean").get<std::vector<double>>();
        s.std = j.at("std").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("preprocess state: {}", e.what()));
    }
    if (s.mean.size() != s.std.size()) {
        fail(ErrorKind::Format, "preprocess state: mean/std length mismatch");
    }
    for (double& v : s.std) {
        v = std::max(v, kStdFloor);
    }
    return s;
}

PreprocessState fit_preprocess(const std::vector<const ModelCheckpoint*>& models, std::size_t d_t) {
    require(!models.empty(), ErrorKind::Data, "fit_preprocess: no models");
    const auto& arch = models.front()->arch;
    PreprocessState s;
    s.d_t = d_t;
    s.mean.assign(arch.layers.size(), 0.0);
    s.std.assign(arch.layers.size(), 1.0);
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        if (!arch.layers[i].learnable()) {
            continue;
        }
        // two passes in double for a stable population variance
        double total = 0.0;
        std::size_t count = 0;
        for (const auto* m : models) {
            require(m->arch == arch, ErrorKind::Argument, "fit_preprocess: mixed architectures");
            for (float v : m->layers[i].weight.storage()) {
                total += v;
            }
            for (float v : m->layers[i].bias.storage()) {
                total += v;
            }
            count += m->layers[i].weight.size() + m->layers[i].bias.size();
        }
        const double mu = total / double(count);
        double sq = 0.0;
        for (const auto* m : models) {
            for (float v : m->layers[i].weight.storage()) {
                sq += (v - mu) * (v - mu);
            }
            for (float v : m->layers[i].bias.storage()) {
                sq += (v - mu) * (v - mu);
            }
        }
        s.mean[i] = mu;
        s.std[i] = std::max(std::sqrt(sq / double(count)), kStdFloor);
    }
    return s;
}

ModelCheckpoint standardize(const ModelCheckpoint& m, const PreprocessState& s) {
    return map_learnable(m, s, [](double v, double mu, double sd) { return (v - mu) / sd; });
}

ModelCheckpoint destandardize(const ModelCheckpoint& m, const PreprocessState& s) {
    return map_learnable(m, s, [](double v, double mu, double sd) { return v * sd + mu; });
}

std::vector<LayerLayout> token_layout(const zoo::Architecture& arch, std::size_t d_t) {
    require(d_t >= 1, ErrorKind::Argument, "token size must be at least 1");
    std::vector<LayerLayout> out;
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& spec = arch.layers[i];
        if (!spec.learnable()) {
            continue;
        }
        LayerLayout l;
        l.layer = i;
        l.rows = spec.out;
        l.row_width = spec.row_width() + (spec.has_bias ? 1 : 0);
        l.parts = (l.row_width + d_t - 1) / d_t;
        l.pad = l.parts * d_t - l.row_width;
        out.push_back(l);
    }
    return out;
}

std::size_t token_count(const zoo::Architecture& arch, std::size_t d_t) {
    std::size_t n = 0;
    for (const auto& l : token_layout(arch, d_t)) {
        n += l.tokens();
    }
    return n;
}

TokenSequence tokenize(const ModelCheckpoint& m, std::size_t d_t) {
    TokenSequence t;
    t.d_t = d_t;
    t.layout = token_layout(m.arch, d_t);
    std::size_t n = 0;
    for (const auto& l : t.layout) {
        n += l.tokens();
    }
    require(n > 0, ErrorKind::Argument, "tokenize: model has no learnable parameters");
    t.tokens = TensorF(n, d_t);
    t.mask = TensorF(n, d_t);
    t.positions.reserve(n);
    std::size_t row = 0;
    for (std::size_t li = 0; li < t.layout.size(); ++li) {
        const auto& l = t.layout[li];
        const TensorF mat = m.layer_matrix(l.layer);
        std::int64_t k = 1;
        for (std::size_t r = 0; r < l.rows; ++r) {
            for (std::size_t p = 0; p < l.parts; ++p) {
                const std::size_t begin = p * d_t;
                const std::size_t len = std::min(d_t, l.row_width - begin);
                std::copy_n(mat.row(r) + begin, len, t.tokens.row(row));
                std::fill_n(t.mask.row(row), len, 1.0F);
                t.positions.push_back(
                    {static_cast<std::int64_t>(row) + 1, static_cast<std::int64_t>(li) + 1, k++});
                ++row;
            }
        }
    }
    return t;
}

namespace {

void write_tokens(const TensorF& tokens, std::size_t d_t, const std::vector<LayerLayout>& layout,
                  ModelCheckpoint& m) {
    std::size_t row = 0;
    for (const auto& l : layout) {
        TensorF mat(l.rows, l.row_width);
        for (std::size_t r = 0; r < l.rows; ++r) {
            for (std::size_t p = 0; p < l.parts; ++p) {
                const std::size_t begin = p * d_t;
                const std::size_t len = std::min(d_t, l.row_width - begin);
                std::copy_n(tokens.row(row), len, mat.row(r) + begin);
                ++row;
            }
        }
        m.set_layer_matrix(l.layer, mat);
    }
}

}  // namespace

void detokenize_into(const TokenSequence& t, ModelCheckpoint& m) {
    const auto expected = token_layout(m.arch, t.d_t);
    if (expected != t.layout) {
        fail(ErrorKind::Format, "detokenize: token layout does not match architecture");
    }
    if (t.tokens.rows() != token_count(m.arch, t.d_t) || t.tokens.cols() != t.d_t) {
        fail(ErrorKind::Format,
             fmt::format("detokenize: token matrix {} does not match layout",
                         num::shape_str(t.tokens.shape())));
    }
    write_tokens(t.tokens, t.d_t, t.layout, m);
}

ModelCheckpoint detokenize(const TokenSequence& t, const zoo::Architecture& arch) {
    ModelCheckpoint m = zoo::empty_checkpoint(arch);
    detokenize_into(t, m);
    return m;
}

ModelCheckpoint detokenize_tokens(const TensorF& tokens, const zoo::Architecture& arch,
                                  std::size_t d_t) {
    const auto layout = token_layout(arch, d_t);
    if (tokens.rows() != token_count(arch, d_t) || tokens.cols() != d_t) {
        fail(ErrorKind::Format,
             fmt::format("detokenize: token matrix {} does not match layout",
                         num::shape_str(tokens.shape())));
    }
    ModelCheckpoint m = zoo::empty_checkpoint(arch);
    write_tokens(tokens, d_t, layout, m);
    return m;
}

Window slice_window(const TokenSequence& t, std::size_t start, std::size_t length) {
    require(start + length <= t.size() && length > 0, ErrorKind::Argument,
            "window out of range");
    Window w;
    w.start = start;
    w.tokens = TensorF(length, t.d_t);
    w.mask = TensorF(length, t.d_t);
    std::copy_n(t.tokens.row(start), length * t.d_t, w.tokens.data());
    std::copy_n(t.mask.row(start), length * t.d_t, w.mask.data());
    w.positions.assign(t.positions.begin() + static_cast<std::ptrdiff_t>(start),
                       t.positions.begin() + static_cast<std::ptrdiff_t>(start + length));
    return w;
}

Window draw_window(const TokenSequence& t, std::size_t ws, Rng& rng) {
    require(ws >= 1, ErrorKind::Argument, "window size must be at least 1");
    const std::size_t n = t.size();
    const std::size_t len = std::min(ws, n);
    const std::size_t last = n - len;
    const auto start = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(last)));
    return slice_window(t, start, len);
}

std::size_t windows_per_model(std::size_t n, std::size_t ws) {
    require(n >= 1 && ws >= 1, ErrorKind::Argument, "windows_per_model: N and ws must be positive");
    return (n + ws - 1) / ws;
}

}  // namespace sane::tok
