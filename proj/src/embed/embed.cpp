// SPDX-License-Identifier: Apache-2.0

#include "embed/embed.hpp"

#include <cmath>

#include <fmt/format.h>

#include "common/container.hpp"
#include "common/parallel.hpp"

namespace sane::embed {

std::vector<Chunk> plan_chunks(std::size_t n, std::size_t chunk, std::size_t halo) {
    require(chunk >= 1, ErrorKind::Argument, "chunk size must be at least 1");
    std::vector<Chunk> out;
    for (std::size_t b = 0; b < n; b += chunk) {
        Chunk c;
        c.begin = b;
        c.end = std::min(n, b + chunk);
        c.outer_begin = b >= halo ? b - halo : 0;
        c.outer_end = std::min(n, c.end + halo);
        out.push_back(c);
    }
    return out;
}

std::size_t default_halo(const SaneModel& m) { return m.config().ws / 4; }

namespace {

// Runs `fn` on all chunks packed into one forward pass and stitches the
// content rows of every chunk back in sequence order.
template <typename Fn>
TensorF chunked(const TensorF& rows, const std::vector<tok::Position>& pos, std::size_t out_width,
                std::size_t chunk, std::size_t halo, Fn fn) {
    const std::size_t n = pos.size();
    TensorF out(n, out_width);
    if (n == 0) {
        return out;
    }
    const auto chunks = plan_chunks(n, chunk, halo);
    const std::size_t w = rows.cols();
    std::vector<float> packed;
    std::vector<tok::Position> ppos;
    std::vector<num::Segment> segs;
    for (const auto& c : chunks) {
        segs.push_back({ppos.size(), c.outer_end - c.outer_begin});
        packed.insert(packed.end(), rows.data() + c.outer_begin * w, rows.data() + c.outer_end * w);
        ppos.insert(ppos.end(), pos.begin() + static_cast<std::ptrdiff_t>(c.outer_begin),
                    pos.begin() + static_cast<std::ptrdiff_t>(c.outer_end));
    }
    model::TapeF tape(false);
    auto x = num::constant(TensorF(num::Shape{ppos.size(), w}, std::move(packed)));
    const TensorF y = fn(tape, x, ppos, segs)->value;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        const auto& c = chunks[i];
        const std::size_t skip = c.begin - c.outer_begin;
        std::copy_n(y.row(segs[i].offset + skip), (c.end - c.begin) * out_width, out.row(c.begin));
    }
    return out;
}

}  // namespace

EmbeddingSequence embed_model(const SaneModel& m, const tok::TokenSequence& t, std::size_t chunk,
                              std::size_t halo) {
    EmbeddingSequence e;
    e.positions = t.positions;
    e.z = chunked(t.tokens, t.positions, m.config().d_z, chunk, halo,
                  [&](model::TapeF& tape, const model::VarF& x, const auto& p, const auto& s) {
                      return m.encode(tape, x, p, s);
                  });
    return e;
}

TensorF decode_sequence(const SaneModel& m, const TensorF& z,
                        const std::vector<tok::Position>& pos, std::size_t chunk,
                        std::size_t halo) {
    require(z.rows() == pos.size(), ErrorKind::Dimension,
            "decode_sequence: latent and position counts differ");
    return chunked(z, pos, m.config().d_t, chunk, halo,
                   [&](model::TapeF& tape, const model::VarF& x, const auto& p, const auto& s) {
                       return m.decode(tape, x, p, s);
                   });
}

double reconstruction_error(const SaneModel& m, const tok::TokenSequence& t, std::size_t chunk,
                            std::size_t halo) {
    const auto e = embed_model(m, t, chunk, halo);
    const TensorF rec = decode_sequence(m, e.z, e.positions, chunk, halo);
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const double d = double(rec[i]) - double(t.tokens[i]);
        num += t.mask[i] * d * d;
        den += t.mask[i];
    }
    return den > 0 ? num / den : 0.0;
}

std::vector<double> window_curve(const SaneModel& m, const std::vector<const tok::TokenSequence*>& seqs,
                                 const std::vector<std::size_t>& windows, std::size_t workers) {
    require(!seqs.empty(), ErrorKind::Argument, "window_curve: no sequences");
    std::vector<double> err(seqs.size() * windows.size());
    parallel_for(err.size(), workers, [&](std::size_t i) {
        const auto& t = *seqs[i / windows.size()];
        const std::size_t w = windows[i % windows.size()];
        err[i] = reconstruction_error(m, t, w == 0 ? std::max<std::size_t>(1, t.size()) : w, 0);
    });
    std::vector<double> out(windows.size(), 0.0);
    for (std::size_t i = 0; i < err.size(); ++i) {
        out[i % windows.size()] += err[i] / double(seqs.size());
    }
    return out;
}

std::vector<double> aggregate_mean(const EmbeddingSequence& e) {
    require(e.size() >= 1, ErrorKind::Argument, "aggregate_mean: empty embedding sequence");
    const std::size_t d = e.z.cols();
    std::vector<double> out(d, 0.0);
    for (std::size_t r = 0; r < e.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            out[c] += e.z(r, c);
        }
    }
    for (auto& v : out) {
        v /= double(e.size());
    }
    return out;
}

std::vector<double> layer_spread(const EmbeddingSequence& e) {
    std::int64_t layers = 0;
    for (const auto& p : e.positions) {
        layers = std::max(layers, p[1]);
    }
    const std::size_t d = e.z.cols();
    std::vector<double> out(static_cast<std::size_t>(layers), 0.0);
    for (std::int64_t l = 1; l <= layers; ++l) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < e.size(); ++r) {
            if (e.positions[r][1] == l) {
                rows.push_back(r);
            }
        }
        if (rows.size() < 2) {
            continue;
        }
        double total = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            double mu = 0.0;
            for (std::size_t r : rows) {
                mu += e.z(r, c);
            }
            mu /= double(rows.size());
            double var = 0.0;
            for (std::size_t r : rows) {
                var += (e.z(r, c) - mu) * (e.z(r, c) - mu);
            }
            total += std::sqrt(var / double(rows.size()));
        }
        out[static_cast<std::size_t>(l - 1)] = total / double(d);
    }
    return out;
}

std::vector<double> pairwise_distances(const EmbeddingSequence& e, std::int64_t l) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < e.size(); ++r) {
        if (e.positions[r][1] == l) {
            rows.push_back(r);
        }
    }
    std::vector<double> out;
    const std::size_t d = e.z.cols();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double t = double(e.z(rows[i], c)) - double(e.z(rows[j], c));
                s += t * t;
            }
            out.push_back(std::sqrt(s));
        }
    }
    return out;
}

void save_embeddings(const std::vector<EmbeddingSequence>& es, const std::filesystem::path& dir) {
    Container c("embeddings");
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < es.size(); ++i) {
        const auto& e = es[i];
        items.push_back({{"model_id", e.model_id}, {"epoch", e.epoch}});
        c.add(fmt::format("e{}.z", i), e.z);
        std::vector<std::int64_t> flat;
        for (const auto& p : e.positions) {
            flat.insert(flat.end(), p.begin(), p.end());
        }
        c.add_i64(fmt::format("e{}.positions", i), {e.size(), 3}, flat);
    }
    c.meta()["items"] = items;
    c.save(dir);
}

std::vector<EmbeddingSequence> load_embeddings(const std::filesystem::path& dir) {
    const Container c = Container::load(dir);
    if (c.kind() != "embeddings") {
        fail(ErrorKind::Format, fmt::format("{} does not hold embeddings", dir.string()));
    }
    std::vector<EmbeddingSequence> out;
    const auto& items = c.meta().at("items");
    for (std::size_t i = 0; i < items.size(); ++i) {
        EmbeddingSequence e;
        e.model_id = items[i].at("model_id").get<std::int64_t>();
        e.epoch = items[i].at("epoch").get<std::int64_t>();
        e.z = c.get_f32(fmt::format("e{}.z", i));
        const auto flat = c.get_i64(fmt::format("e{}.positions", i));
        if (flat.size() != e.z.rows() * 3) {
            fail(ErrorKind::Format, fmt::format("e{}.positions does not match e{}.z", i, i),
                 fmt::format("e{}.positions", i));
        }
        for (std::size_t r = 0; r < e.z.rows(); ++r) {
            e.positions.push_back({flat[3 * r], flat[3 * r + 1], flat[3 * r + 2]});
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::string embeddings_csv(const std::vector<EmbeddingSequence>& es) {
    std::string out;
    if (es.empty()) {
        return "model_id,epoch\n";
    }
    const std::size_t d = es.front().z.cols();
    const std::size_t layers = layer_spread(es.front()).size();
    out = "model_id,epoch";
    for (std::size_t c = 0; c < d; ++c) {
        out += fmt::format(",zbar_{}", c);
    }
    for (std::size_t l = 1; l <= layers; ++l) {
        out += fmt::format(",spread_{}", l);
    }
    out += "\n";
    for (const auto& e : es) {
        out += fmt::format("{},{}", e.model_id, e.epoch);
        for (double v : aggregate_mean(e)) {
            out += fmt::format(",{:.9g}", v);
        }
        for (double v : layer_spread(e)) {
            out += fmt::format(",{:.9g}", v);
        }
        out += "\n";
    }
    return out;
}

}  // namespace sane::embed
