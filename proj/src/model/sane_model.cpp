// SPDX-License-Identifier: Apache-2.0

#include "model/sane_model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "common/config_reader.hpp"
#include "common/container.hpp"
#include "common/rng.hpp"

namespace sane::model {

void SaneConfig::validate() const {
    auto bad = [](const char* key, const std::string& what) {
        fail(ErrorKind::Config, fmt::format("sane.{}: {}", key, what), fmt::format("sane.{}", key));
    };
    if (d_t < 1) bad("d_t", "must be at least 1");
    if (d_z < 1 || d_z > 4 * d_t) bad("d_z", "must lie in [1, 4*d_t]");
    if (heads < 1 || d_model % heads != 0) bad("heads", "must divide d_model");
    if (ffn_mult < 1) bad("ffn_mult", "must be at least 1");
    if (d_proj < 1) bad("d_proj", "must be at least 1");
    if (ws < 1) bad("ws", "must be at least 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) bad("gamma", "must lie in [0, 1]");
    if (!(tau > 0.0)) bad("tau", "must be positive");
    if (!(sigma >= 0.0)) bad("sigma", "must be non-negative");
    if (!(lr_max > 0.0)) bad("lr_max", "must be positive");
    if (epochs < 1) bad("epochs", "must be at least 1");
    if (batch_size < 2) bad("batch_size", "needs at least 2 windows for contrastive negatives");
    if (permutation_pool < 1) bad("permutation_pool", "must be at least 1");
}

nlohmann::json config_to_json(const SaneConfig& c) {
    return {{"d_t", c.d_t},
            {"d_z", c.d_z},
            {"d_model", c.d_model},
            {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"heads", c.heads},
            {"ffn_mult", c.ffn_mult},
            {"d_proj", c.d_proj},
            {"ws", c.ws},
            {"gamma", c.gamma},
            {"tau", c.tau},
            {"sigma", c.sigma},
            {"lr_max", c.lr_max},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"patience", c.patience},
            {"batch_size", c.batch_size},
            {"permutation_pool", c.permutation_pool},
            {"seed", c.seed}};
}

SaneConfig config_from_json(const nlohmann::json& j, const std::string& path) {
    SaneConfig c;
    ConfigReader r(j, path);
    r.get("d_t", c.d_t);
    r.get("d_z", c.d_z);
    r.get("d_model", c.d_model);
    r.get("encoder_layers", c.encoder_layers);
    r.get("decoder_layers", c.decoder_layers);
    r.get("heads", c.heads);
    r.get("ffn_mult", c.ffn_mult);
    r.get("d_proj", c.d_proj);
    r.get("ws", c.ws);
    r.get("gamma", c.gamma);
    r.get("tau", c.tau);
    r.get("sigma", c.sigma);
    r.get("lr_max", c.lr_max);
    r.get("weight_decay", c.weight_decay);
    r.get("epochs", c.epochs);
    r.get("patience", c.patience);
    r.get("batch_size", c.batch_size);
    r.get("permutation_pool", c.permutation_pool);
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

Capacity capacity_for(const std::vector<const tok::TokenSequence*>& seqs) {
    Capacity c;
    for (const auto* s : seqs) {
        for (const auto& p : s->positions) {
            c.n = std::max(c.n, p[0]);
            c.l = std::max(c.l, p[1]);
            c.k = std::max(c.k, p[2]);
        }
    }
    c.n *= 2;
    c.l *= 2;
    c.k *= 2;
    return c;
}

namespace {

TensorF uniform_init(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
    TensorF t(rows, cols);
    for (auto& v : t.storage()) {
        v = static_cast<float>(rng.uniform(-bound, bound));
    }
    return t;
}

TensorF normal_init(std::size_t rows, std::size_t cols, double std, Rng& rng) {
    TensorF t(rows, cols);
    for (auto& v : t.storage()) {
        v = static_cast<float>(rng.normal(0.0, std));
    }
    return t;
}

}  // namespace

SaneModel::SaneModel(const SaneConfig& cfg, const Capacity& cap, std::uint64_t seed)
    : cfg_(cfg), cap_(cap) {
    cfg_.validate();
    require(cap.n >= 1 && cap.l >= 1 && cap.k >= 1, ErrorKind::Argument,
            "position capacity must be positive");
    Rng rng(seed);
    auto linear = [&](std::size_t in, std::size_t out) {
        const double bound = 1.0 / std::sqrt(double(in));
        return Linear{num::parameter(uniform_init(out, in, bound, rng)),
                      num::parameter(uniform_init(1, out, bound, rng))};
    };
    auto ones = [](std::size_t n) { return num::parameter(TensorF(num::Shape{1, n}, 1.0F)); };
    auto zeros = [](std::size_t n) { return num::parameter(TensorF(1, n)); };
    const std::size_t d = cfg_.d_model;
    auto make_block = [&]() {
        Block b;
        b.ln1_g = ones(d);
        b.ln1_b = zeros(d);
        b.q = linear(d, d);
        b.k = linear(d, d);
        b.v = linear(d, d);
        b.o = linear(d, d);
        b.ln2_g = ones(d);
        b.ln2_b = zeros(d);
        b.ff1 = linear(d, d * cfg_.ffn_mult);
        b.ff2 = linear(d * cfg_.ffn_mult, d);
        return b;
    };
    in_proj_ = linear(cfg_.d_t, d);
    pos_n_ = num::parameter(normal_init(std::size_t(cap.n) + 1, d, 0.02, rng));
    pos_l_ = num::parameter(normal_init(std::size_t(cap.l) + 1, d, 0.02, rng));
    pos_k_ = num::parameter(normal_init(std::size_t(cap.k) + 1, d, 0.02, rng));
    for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
        encoder_.push_back(make_block());
    }
    enc_ln_g_ = ones(d);
    enc_ln_b_ = zeros(d);
    down_ = linear(d, cfg_.d_z);
    up_ = linear(cfg_.d_z, d);
    for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
        decoder_.push_back(make_block());
    }
    dec_ln_g_ = ones(d);
    dec_ln_b_ = zeros(d);
    head_ = linear(d, cfg_.d_t);
    proj1_ = linear(cfg_.d_z, cfg_.d_z);
    proj2_ = linear(cfg_.d_z, cfg_.d_proj);
}

void SaneModel::for_each(const std::function<void(const std::string&, const VarF&)>& fn) const {
    auto lin = [&](const std::string& name, const Linear& l) {
        fn(name + ".weight", l.w);
        fn(name + ".bias", l.b);
    };
    auto blk = [&](const std::string& name, const Block& b) {
        fn(name + ".ln1.gain", b.ln1_g);
        fn(name + ".ln1.bias", b.ln1_b);
        lin(name + ".q", b.q);
        lin(name + ".k", b.k);
        lin(name + ".v", b.v);
        lin(name + ".o", b.o);
        fn(name + ".ln2.gain", b.ln2_g);
        fn(name + ".ln2.bias", b.ln2_b);
        lin(name + ".ff1", b.ff1);
        lin(name + ".ff2", b.ff2);
    };
    lin("in_proj", in_proj_);
    fn("pos.n", pos_n_);
    fn("pos.l", pos_l_);
    fn("pos.k", pos_k_);
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
        blk(fmt::format("encoder.{}", i), encoder_[i]);
    }
    fn("encoder.ln.gain", enc_ln_g_);
    fn("encoder.ln.bias", enc_ln_b_);
    lin("down", down_);
    lin("up", up_);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        blk(fmt::format("decoder.{}", i), decoder_[i]);
    }
    fn("decoder.ln.gain", dec_ln_g_);
    fn("decoder.ln.bias", dec_ln_b_);
    lin("head", head_);
    lin("proj1", proj1_);
    lin("proj2", proj2_);
}

std::vector<VarF> SaneModel::parameters() const {
    std::vector<VarF> out;
    for_each([&](const std::string&, const VarF& v) { out.push_back(v); });
    return out;
}

std::vector<VarF> SaneModel::autoencoder_parameters() const {
    std::vector<VarF> out;
    for_each([&](const std::string& name, const VarF& v) {
        if (name.rfind("proj", 0) != 0) {
            out.push_back(v);
        }
    });
    return out;
}

std::size_t SaneModel::num_parameters() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const VarF& v) { n += v->value.size(); });
    return n;
}

SaneModel SaneModel::clone() const {
    SaneModel m = *this;
    // rebind every handle to fresh nodes holding copies of the values
    auto fresh = [](VarF& v) { v = num::parameter(v->value); };
    auto lin = [&](Linear& l) {
        fresh(l.w);
        fresh(l.b);
    };
    lin(m.in_proj_);
    fresh(m.pos_n_);
    fresh(m.pos_l_);
    fresh(m.pos_k_);
    for (auto* stack : {&m.encoder_, &m.decoder_}) {
        for (auto& b : *stack) {
            fresh(b.ln1_g);
            fresh(b.ln1_b);
            lin(b.q);
            lin(b.k);
            lin(b.v);
            lin(b.o);
            fresh(b.ln2_g);
            fresh(b.ln2_b);
            lin(b.ff1);
            lin(b.ff2);
        }
    }
    fresh(m.enc_ln_g_);
    fresh(m.enc_ln_b_);
    lin(m.down_);
    lin(m.up_);
    fresh(m.dec_ln_g_);
    fresh(m.dec_ln_b_);
    lin(m.head_);
    lin(m.proj1_);
    lin(m.proj2_);
    return m;
}

void SaneModel::copy_values_from(const SaneModel& other) {
    auto dst = parameters();
    auto src = other.parameters();
    require(dst.size() == src.size(), ErrorKind::Argument, "copy between different models");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        require(dst[i]->value.shape() == src[i]->value.shape(), ErrorKind::Argument,
                "copy between different models");
        dst[i]->value = src[i]->value;
    }
}

VarF SaneModel::embed_positions(TapeF& tape, const std::vector<tok::Position>& pos) const {
    std::vector<std::int64_t> n(pos.size());
    std::vector<std::int64_t> l(pos.size());
    std::vector<std::int64_t> k(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
        const auto& p = pos[i];
        if (p[0] < 1 || p[0] > cap_.n || p[1] < 1 || p[1] > cap_.l || p[2] < 1 || p[2] > cap_.k) {
            fail(ErrorKind::Capacity,
                 fmt::format("position [{}, {}, {}] exceeds embedder capacity [{}, {}, {}]", p[0],
                             p[1], p[2], cap_.n, cap_.l, cap_.k));
        }
        n[i] = p[0];
        l[i] = p[1];
        k[i] = p[2];
    }
    auto e = tape.add(tape.gather_rows(pos_n_, n), tape.gather_rows(pos_l_, l));
    return tape.add(e, tape.gather_rows(pos_k_, k));
}

VarF SaneModel::block(TapeF& tape, const Block& b, const VarF& x,
                      const std::vector<Segment>& segs) const {
    const float eps = 1e-5F;
    auto h = tape.layer_norm(x, b.ln1_g, b.ln1_b, eps);
    auto att = tape.attention(apply(tape, b.q, h), apply(tape, b.k, h), apply(tape, b.v, h),
                              cfg_.heads, segs);
    auto x1 = tape.add(x, apply(tape, b.o, att));
    auto h2 = tape.layer_norm(x1, b.ln2_g, b.ln2_b, eps);
    auto ff = apply(tape, b.ff2, tape.gelu(apply(tape, b.ff1, h2)));
    return tape.add(x1, ff);
}

VarF SaneModel::encode(TapeF& tape, const VarF& tokens, const std::vector<tok::Position>& pos,
                       const std::vector<Segment>& segs) const {
    require(tokens->value.rows() == pos.size(), ErrorKind::Dimension,
            "encode: token and position counts differ");
    require(tokens->value.cols() == cfg_.d_t, ErrorKind::Dimension,
            fmt::format("encode: token width {} does not match d_t {}", tokens->value.cols(),
                        cfg_.d_t));
    auto x = tape.add(apply(tape, in_proj_, tokens), embed_positions(tape, pos));
    for (const auto& b : encoder_) {
        x = block(tape, b, x, segs);
    }
    x = tape.layer_norm(x, enc_ln_g_, enc_ln_b_, 1e-5F);
    return apply(tape, down_, x);
}

VarF SaneModel::decode(TapeF& tape, const VarF& z, const std::vector<tok::Position>& pos,
                       const std::vector<Segment>& segs) const {
    require(z->value.rows() == pos.size(), ErrorKind::Dimension,
            "decode: latent and position counts differ");
    require(z->value.cols() == cfg_.d_z, ErrorKind::Dimension, "decode: latent width mismatch");
    auto x = tape.add(apply(tape, up_, z), embed_positions(tape, pos));
    for (const auto& b : decoder_) {
        x = block(tape, b, x, segs);
    }
    x = tape.layer_norm(x, dec_ln_g_, dec_ln_b_, 1e-5F);
    return apply(tape, head_, x);
}

VarF SaneModel::project(TapeF& tape, const VarF& z, const std::vector<Segment>& segs) const {
    auto pooled = tape.segment_mean(z, segs);
    return apply(tape, proj2_, tape.relu(apply(tape, proj1_, pooled)));
}

TensorF SaneModel::encode_window(const TensorF& tokens,
                                 const std::vector<tok::Position>& pos) const {
    if (pos.empty()) {
        return TensorF(0, cfg_.d_z);
    }
    TapeF tape(false);
    return encode(tape, num::constant(tokens), pos, {{0, pos.size()}})->value;
}

TensorF SaneModel::decode_window(const TensorF& z, const std::vector<tok::Position>& pos) const {
    if (pos.empty()) {
        return TensorF(0, cfg_.d_t);
    }
    TapeF tape(false);
    return decode(tape, num::constant(z), pos, {{0, pos.size()}})->value;
}

void SaneModel::save(const std::filesystem::path& dir, const nlohmann::json& extra_meta) const {
    Container c("sane-model");
    c.meta() = extra_meta;
    c.meta()["config"] = config_to_json(cfg_);
    c.meta()["capacity"] = {{"n", cap_.n}, {"l", cap_.l}, {"k", cap_.k}};
    for_each([&](const std::string& name, const VarF& v) { c.add(name, v->value); });
    c.save(dir);
}

SaneModel SaneModel::load(const std::filesystem::path& dir, nlohmann::json* extra_meta) {
    const Container c = Container::load(dir);
    if (c.kind() != "sane-model") {
        fail(ErrorKind::Format, fmt::format("{} does not hold a SANE model", dir.string()));
    }
    SaneConfig cfg;
    Capacity cap;
    try {
        cfg = config_from_json(c.meta().at("config"));
        const auto& jc = c.meta().at("capacity");
        cap = {jc.at("n").get<std::int64_t>(), jc.at("l").get<std::int64_t>(),
               jc.at("k").get<std::int64_t>()};
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, fmt::format("model manifest: {}", e.what()));
    }
    SaneModel m(cfg, cap, 0);
    m.for_each([&](const std::string& name, const VarF& v) {
        TensorF t = c.get_f32(name);
        if (t.shape() != v->value.shape()) {
            fail(ErrorKind::Format, fmt::format("tensor {} has shape {}, expected {}", name,
                                                num::shape_str(t.shape()),
                                                num::shape_str(v->value.shape())),
                 name);
        }
        v->value = std::move(t);
    });
    if (extra_meta) {
        *extra_meta = c.meta();
    }
    return m;
}

VarF loss_reconstruction(TapeF& tape, const VarF& pred, const VarF& target, const VarF& mask) {
    return tape.mse_masked(pred, target, mask);
}

VarF nt_xent(TapeF& tape, const VarF& a, const VarF& b, double tau) {
    const std::size_t n = a->value.rows();
    require(n >= 2, ErrorKind::Argument, "NT-Xent needs a batch of at least 2");
    require(b->value.rows() == n && b->value.cols() == a->value.cols(), ErrorKind::Dimension,
            "NT-Xent views differ in shape");
    auto p = tape.l2_normalize_rows(tape.concat_rows({a, b}));
    auto sim = tape.scale(tape.matmul(p, p, false, true), static_cast<float>(1.0 / tau));
    std::vector<std::int64_t> labels(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<std::int64_t>(i + n);
        labels[i + n] = static_cast<std::int64_t>(i);
    }
    return tape.cross_entropy(sim, labels, true);
}

}  // namespace sane::model
