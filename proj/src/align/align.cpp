// SPDX-License-Identifier: Apache-2.0

#include "align/align.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "align/hungarian.hpp"
#include "common/parallel.hpp"

namespace sane::align {

namespace {

using zoo::LayerKind;
using zoo::LayerParams;
using num::TensorF;

struct Boundary {
    std::size_t producer = 0;
    std::size_t consumer = 0;
    std::vector<std::size_t> batchnorms;  // layers between producer and consumer
    std::size_t width = 0;
    std::size_t group = 1;  // consumer input columns per unit
};

std::vector<Boundary> boundaries(const zoo::Architecture& arch) {
    const auto learn = arch.learnable_layers();
    std::vector<Boundary> out;
    for (std::size_t b = 0; b + 1 < learn.size(); ++b) {
        Boundary bd;
        bd.producer = learn[b];
        bd.consumer = learn[b + 1];
        for (std::size_t i = bd.producer + 1; i < bd.consumer; ++i) {
            if (arch.layers[i].kind == LayerKind::BatchNorm) {
                bd.batchnorms.push_back(i);
            }
        }
        bd.width = arch.layers[bd.producer].out;
        const std::size_t rw = arch.layers[bd.consumer].row_width();
        require(bd.width > 0 && rw % bd.width == 0, ErrorKind::Dimension,
                "consumer input width is not a multiple of the producer width");
        bd.group = rw / bd.width;
        out.push_back(bd);
    }
    return out;
}

void check_perm(const std::vector<std::size_t>& p, std::size_t width, std::size_t b) {
    if (p.size() != width) {
        fail(ErrorKind::Dimension,
             fmt::format("permutation {} has length {}, boundary width is {}", b, p.size(), width));
    }
    std::vector<char> seen(width, 0);
    for (std::size_t v : p) {
        if (v >= width || seen[v]) {
            fail(ErrorKind::Dimension, fmt::format("permutation {} is not a bijection", b));
        }
        seen[v] = 1;
    }
}

}  // namespace

std::vector<std::size_t> boundary_widths(const zoo::Architecture& arch) {
    std::vector<std::size_t> w;
    for (const auto& b : boundaries(arch)) {
        w.push_back(b.width);
    }
    return w;
}

Permutations identity_permutations(const zoo::Architecture& arch) {
    Permutations p;
    for (std::size_t w : boundary_widths(arch)) {
        std::vector<std::size_t> id(w);
        for (std::size_t i = 0; i < w; ++i) {
            id[i] = i;
        }
        p.push_back(std::move(id));
    }
    return p;
}

Permutations invert(const Permutations& p) {
    Permutations out = p;
    for (std::size_t b = 0; b < p.size(); ++b) {
        for (std::size_t i = 0; i < p[b].size(); ++i) {
            out[b][p[b][i]] = i;
        }
    }
    return out;
}

ModelCheckpoint apply_permutation(const ModelCheckpoint& m, const Permutations& p) {
    const auto bds = boundaries(m.arch);
    if (p.size() != bds.size()) {
        fail(ErrorKind::Dimension, fmt::format("expected {} permutations, got {}", bds.size(),
                                               p.size()));
    }
    ModelCheckpoint out = m;
    for (std::size_t b = 0; b < bds.size(); ++b) {
        const auto& bd = bds[b];
        const auto& perm = p[b];
        check_perm(perm, bd.width, b);

        // producer rows
        const auto& src = out.layers[bd.producer];
        auto& dst_spec = m.arch.layers[bd.producer];
        const std::size_t rw = dst_spec.row_width();
        LayerParams moved = src;
        for (std::size_t i = 0; i < bd.width; ++i) {
            std::copy_n(src.weight.data() + perm[i] * rw, rw, moved.weight.data() + i * rw);
            if (dst_spec.has_bias) {
                moved.bias[i] = src.bias[perm[i]];
            }
        }
        out.layers[bd.producer] = std::move(moved);

        for (std::size_t bn : bd.batchnorms) {
            auto buf = out.layers[bn].buffers;
            for (std::size_t i = 0; i < bd.width; ++i) {
                buf.mean[i] = out.layers[bn].buffers.mean[perm[i]];
                buf.var[i] = out.layers[bn].buffers.var[perm[i]];
            }
            out.layers[bn].buffers = std::move(buf);
        }

        // consumer column groups
        const auto& cspec = m.arch.layers[bd.consumer];
        const std::size_t crw = cspec.row_width();
        const TensorF cw = out.layers[bd.consumer].weight;
        auto& dst = out.layers[bd.consumer].weight;
        for (std::size_t r = 0; r < cspec.out; ++r) {
            for (std::size_t i = 0; i < bd.width; ++i) {
                std::copy_n(cw.data() + r * crw + perm[i] * bd.group, bd.group,
                            dst.data() + r * crw + i * bd.group);
            }
        }
    }
    return out;
}

double squared_distance(const ModelCheckpoint& a, const ModelCheckpoint& b) {
    require(a.arch == b.arch, ErrorKind::Argument, "distance between different architectures");
    double d = 0.0;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& x = a.layers[i];
        const auto& y = b.layers[i];
        for (std::size_t j = 0; j < x.weight.size(); ++j) {
            const double t = double(x.weight[j]) - double(y.weight[j]);
            d += t * t;
        }
        for (std::size_t j = 0; j < x.bias.size(); ++j) {
            const double t = double(x.bias[j]) - double(y.bias[j]);
            d += t * t;
        }
    }
    return d;
}

namespace {

// Producer rows only, boundary by boundary; the input side of each boundary
// is already fixed when it is solved.
Permutations forward_init(const ModelCheckpoint& ref, const ModelCheckpoint& b,
                          const std::vector<Boundary>& bds) {
    Permutations forward = identity_permutations(ref.arch);
    for (std::size_t k = 0; k < bds.size(); ++k) {
        const std::size_t n = bds[k].width;
        const TensorF pa = ref.layer_matrix(bds[k].producer);
        const TensorF pb = apply_permutation(b, forward).layer_matrix(bds[k].producer);
        std::vector<double> cost(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t c = 0; c < pa.cols(); ++c) {
                    cost[i * n + j] -= double(pa(i, c)) * double(pb(j, c));
                }
            }
        }
        forward[k] = solve_assignment(cost, n);
    }
    return forward;
}

MatchResult descend(const ModelCheckpoint& ref, const ModelCheckpoint& b, const std::vector<Boundary>& bds,
                    Permutations start_perms, std::size_t max_sweeps) {
    MatchResult res;
    res.residual = squared_distance(ref, apply_permutation(b, start_perms));
    res.perms = std::move(start_perms);
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        const double before = res.residual;
        const Permutations start = res.perms;
        for (std::size_t k = 0; k < bds.size(); ++k) {
            const auto& bd = bds[k];
            Permutations trial = res.perms;
            for (std::size_t i = 0; i < bd.width; ++i) {
                trial[k][i] = i;
            }
            const ModelCheckpoint bp = apply_permutation(b, trial);
            const TensorF pa = ref.layer_matrix(bd.producer);
            const TensorF pb = bp.layer_matrix(bd.producer);
            const std::size_t n = bd.width;
            std::vector<double> cost(n * n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < pa.cols(); ++c) {
                        s += double(pa(i, c)) * double(pb(j, c));
                    }
                    cost[i * n + j] -= s;
                }
            }
            const auto& cspec = ref.arch.layers[bd.consumer];
            const std::size_t crw = cspec.row_width();
            const float* ca = ref.layers[bd.consumer].weight.data();
            const float* cb = bp.layers[bd.consumer].weight.data();
            for (std::size_t r = 0; r < cspec.out; ++r) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t g = 0; g < bd.group; ++g) {
                            s += double(ca[r * crw + i * bd.group + g]) *
                                 double(cb[r * crw + j * bd.group + g]);
                        }
                        cost[i * n + j] -= s;
                    }
                }
            }
            auto assignment = solve_assignment(cost, n);
            // keep the previous choice when it is as good: no spurious moves
            Permutations candidate = res.perms;
            for (std::size_t i = 0; i < n; ++i) {
                candidate[k][i] = trial[k][assignment[i]];
            }
            const double r = squared_distance(ref, apply_permutation(b, candidate));
            if (r < res.residual) {
                res.perms = std::move(candidate);
                res.residual = r;
            }
            res.residual_trace.push_back(res.residual);
        }
        res.sweeps = sweep + 1;
        if (!(res.residual < before) || res.perms == start) {
            break;
        }
    }
    return res;
}

}  // namespace

MatchResult weight_matching(const ModelCheckpoint& ref, const ModelCheckpoint& b,
                            std::size_t max_sweeps) {
    if (!(ref.arch == b.arch)) {
        fail(ErrorKind::Argument, "weight matching needs identical architectures");
    }
    const auto bds = boundaries(ref.arch);
    if (bds.empty()) {
        MatchResult res;
        res.residual = squared_distance(ref, b);
        return res;
    }
    // coordinate descent from the identity and from the forward assignment
    MatchResult from_identity = descend(ref, b, bds, identity_permutations(ref.arch), max_sweeps);
    MatchResult from_forward = descend(ref, b, bds, forward_init(ref, b, bds), max_sweeps);
    return from_forward.residual < from_identity.residual ? from_forward : from_identity;
}

std::int64_t default_reference(const zoo::ZooManifest& m) {
    const auto ids = m.model_ids(zoo::Split::Train);
    require(!ids.empty(), ErrorKind::Data, "no models in the training split");
    return *std::min_element(ids.begin(), ids.end());
}

std::vector<AlignStats> align_zoo(zoo::Zoo& zoo, std::int64_t reference_id,
                                  std::size_t max_sweeps, std::size_t workers) {
    auto& man = zoo.manifest;
    const auto train_ids = man.model_ids(zoo::Split::Train);
    if (std::find(train_ids.begin(), train_ids.end(), reference_id) == train_ids.end()) {
        fail(ErrorKind::Config,
             fmt::format("reference model {} is not in the training split", reference_id),
             "reference_id");
    }
    auto last_entry = [&](std::int64_t id) {
        const auto idx = man.entries_of(id);
        if (idx.empty()) {
            fail(ErrorKind::Data, fmt::format("model {} has no checkpoints", id));
        }
        return idx.back();
    };
    const ModelCheckpoint& ref = zoo.checkpoints.at(last_entry(reference_id));
    const auto ids = man.model_ids();
    std::vector<AlignStats> stats(ids.size());
    std::vector<Permutations> perms(ids.size());
    parallel_for(ids.size(), workers, [&](std::size_t i) {
        const auto id = ids[i];
        const ModelCheckpoint& last = zoo.checkpoints.at(last_entry(id));
        stats[i].model_id = id;
        stats[i].distance_before = std::sqrt(squared_distance(ref, last));
        if (id == reference_id) {
            perms[i] = identity_permutations(ref.arch);
            stats[i].distance_after = stats[i].distance_before;
            return;
        }
        auto r = weight_matching(ref, last, max_sweeps);
        perms[i] = std::move(r.perms);
        stats[i].distance_after = std::sqrt(r.residual);
    });
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t e : man.entries_of(ids[i])) {
            zoo.checkpoints[e] = apply_permutation(zoo.checkpoints[e], perms[i]);
        }
        man.permutations[ids[i]] = perms[i];
    }
    man.reference_id = reference_id;
    return stats;
}

}  // namespace sane::align
