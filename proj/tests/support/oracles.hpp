// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "numerics/autodiff.hpp"

namespace sane::testing {

using VarD = num::Var<double>;
using GradFn = std::function<VarD(num::Tape<double>&, const std::vector<VarD>&)>;

inline num::TensorD random_tensor(num::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                  double hi = 1.0) {
    num::TensorD t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.storage()) {
        v = d(rng);
    }
    return t;
}

/// Contracts a tensor-valued op into a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
inline VarD contract(num::Tape<double>& tape, const VarD& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = num::constant(random_tensor(out->value.shape(), rng));
    return tape.sum(tape.mul(out, w));
}

/// Central finite differences against reverse mode, 64-bit. Returns
/// ||analytic - numeric|| / max(||numeric||, 1e-12).
inline double gradient_error(const GradFn& fn, std::vector<num::TensorD> inputs, double h = 1e-5) {
    std::vector<VarD> vars;
    for (auto& t : inputs) {
        vars.push_back(num::parameter(t));
    }
    {
        num::Tape<double> tape;
        auto loss = fn(tape, vars);
        tape.backward(loss);
    }
    double diff_sq = 0.0;
    double ref_sq = 0.0;
    for (std::size_t k = 0; k < vars.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            auto eval_at = [&](double delta) {
                std::vector<VarD> vs;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    num::TensorD t = inputs[j];
                    if (j == k) {
                        t[i] += delta;
                    }
                    vs.push_back(num::constant(std::move(t)));
                }
                num::Tape<double> tape(false);
                return num::item(fn(tape, vs));
            };
            const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            const double analytic = vars[k]->has_grad() ? vars[k]->grad[i] : 0.0;
            diff_sq += (analytic - numeric) * (analytic - numeric);
            ref_sq += numeric * numeric;
        }
    }
    return std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-12);
}

/// Plain-loop NT-Xent over raw projections: rows of `a` pair with rows of `b`.
inline double nt_xent_oracle(const num::TensorF& a, const num::TensorF& b, double tau) {
    const std::size_t n = a.rows();
    const std::size_t d = a.cols();
    std::vector<std::vector<double>> p;
    for (const num::TensorF* t : {&a, &b}) {
        for (std::size_t r = 0; r < n; ++r) {
            double norm = 0;
            for (std::size_t c = 0; c < d; ++c) {
                norm += double((*t)(r, c)) * double((*t)(r, c));
            }
            norm = std::sqrt(norm);
            std::vector<double> row(d);
            for (std::size_t c = 0; c < d; ++c) {
                row[c] = (*t)(r, c) / norm;
            }
            p.push_back(row);
        }
    }
    double total = 0;
    for (std::size_t i = 0; i < 2 * n; ++i) {
        const std::size_t pos = i < n ? i + n : i - n;
        double denom = 0;
        double num = 0;
        for (std::size_t j = 0; j < 2 * n; ++j) {
            if (j == i) {
                continue;
            }
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) {
                s += p[i][c] * p[j][c];
            }
            const double e = std::exp(s / tau);
            denom += e;
            if (j == pos) {
                num = e;
            }
        }
        total += -std::log(num / denom);
    }
    return total / double(2 * n);
}

}  // namespace sane::testing
