// SPDX-License-Identifier: Apache-2.0

#include "analyze/probe.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace sane::analyze {

double percentile_sorted(const std::vector<double>& sorted, double q) {
    require(!sorted.empty(), ErrorKind::Argument, "percentile of an empty array");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> weight_statistics(const zoo::ModelCheckpoint& m) {
    std::vector<double> out;
    for (std::size_t i : m.arch.learnable_layers()) {
        const auto& p = m.layers[i];
        std::vector<double> v(p.weight.storage().begin(), p.weight.storage().end());
        v.insert(v.end(), p.bias.storage().begin(), p.bias.storage().end());
        double mean = 0.0;
        for (double x : v) {
            mean += x;
        }
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) {
            var += (x - mean) * (x - mean);
        }
        std::sort(v.begin(), v.end());
        out.push_back(mean);
        out.push_back(std::sqrt(var / static_cast<double>(v.size())));
        for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            out.push_back(percentile_sorted(v, q));
        }
    }
    return out;
}

std::vector<double> flatten_weights(const zoo::ModelCheckpoint& m) {
    std::vector<double> out;
    for (std::size_t i : m.arch.learnable_layers()) {
        const auto& p = m.layers[i];
        out.insert(out.end(), p.weight.storage().begin(), p.weight.storage().end());
        out.insert(out.end(), p.bias.storage().begin(), p.bias.storage().end());
    }
    return out;
}

const char* target_name(Target t) {
    switch (t) {
        case Target::Acc:
            return "acc";
        case Target::Ep:
            return "epoch";
        case Target::Ggap:
            return "ggap";
    }
    return "?";
}

Target parse_target(const std::string& s) {
    if (s == "acc") {
        return Target::Acc;
    }
    if (s == "epoch") {
        return Target::Ep;
    }
    if (s == "ggap") {
        return Target::Ggap;
    }
    fail(ErrorKind::Config, fmt::format("unknown probe target '{}'", s));
}

double target_value(const zoo::ZooEntry& e, Target t) {
    switch (t) {
        case Target::Acc:
            return e.test_acc;
        case Target::Ep:
            return static_cast<double>(e.epoch);
        case Target::Ggap:
            return e.ggap;
    }
    return 0.0;
}

double r_squared(const std::vector<double>& truth, const std::vector<double>& pred) {
    double mean = 0.0;
    for (double y : truth) {
        mean += y;
    }
    mean /= static_cast<double>(truth.size());
    double ss_res = 0.0;
    double ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    return 1.0 - ss_res / ss_tot;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::Argument,
            "pearson needs two equal-length series");
    const double n = static_cast<double>(x.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

namespace {

void check_rows(const ProbeData& d, const char* which) {
    require(d.features.size() == d.targets.size() && d.model_ids.size() == d.targets.size(),
            ErrorKind::Dimension, fmt::format("{} probe data has mismatched lengths", which));
}

bool constant(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

ProbeReport linear_probe(const ProbeData& train, const ProbeData& test, double lambda) {
    check_rows(train, "train");
    check_rows(test, "test");
    require(train.targets.size() >= 10, ErrorKind::Argument,
            fmt::format("linear probe needs at least 10 train rows, got {}", train.targets.size()));
    require(!test.targets.empty(), ErrorKind::Argument, "linear probe needs test rows");
    const std::set<std::int64_t> train_ids(train.model_ids.begin(), train.model_ids.end());
    for (auto id : test.model_ids) {
        require(!train_ids.count(id), ErrorKind::Data,
                fmt::format("model {} is in both probe train and test sets", id));
    }
    const std::size_t d = train.features.front().size();
    for (const auto* set : {&train, &test}) {
        for (const auto& row : set->features) {
            require(row.size() == d, ErrorKind::Dimension, "probe feature rows differ in length");
        }
    }

    ProbeReport r;
    r.lambda = lambda;
    r.n_train = train.targets.size();
    r.n_test = test.targets.size();
    if (constant(train.targets) || constant(test.targets)) {
        r.failure = "constant target";
        return r;
    }

    const std::size_t n = train.targets.size();
    r.feature_mean.assign(d, 0.0);
    r.feature_std.assign(d, 0.0);
    for (const auto& row : train.features) {
        for (std::size_t c = 0; c < d; ++c) {
            r.feature_mean[c] += row[c];
        }
    }
    for (double& m : r.feature_mean) {
        m /= static_cast<double>(n);
    }
    for (const auto& row : train.features) {
        for (std::size_t c = 0; c < d; ++c) {
            r.feature_std[c] += (row[c] - r.feature_mean[c]) * (row[c] - r.feature_mean[c]);
        }
    }
    for (double& s : r.feature_std) {
        s = std::sqrt(s / static_cast<double>(n));
    }
    auto standardized = [&](const std::vector<double>& row, std::size_t c) {
        return r.feature_std[c] > 0.0 ? (row[c] - r.feature_mean[c]) / r.feature_std[c] : 0.0;
    };

    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    double y_mean = 0.0;
    for (double t : train.targets) {
        y_mean += t;
    }
    y_mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            x(Eigen::Index(i), Eigen::Index(c)) = standardized(train.features[i], c);
        }
        y(Eigen::Index(i)) = train.targets[i] - y_mean;
    }
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    const Eigen::VectorXd beta = gram.ldlt().solve(x.transpose() * y);
    r.coefficients.assign(beta.data(), beta.data() + beta.size());
    r.intercept = y_mean;

    std::vector<double> pred(test.targets.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double p = r.intercept;
        for (std::size_t c = 0; c < d; ++c) {
            p += r.coefficients[c] * standardized(test.features[i], c);
        }
        pred[i] = p;
    }
    r.r2 = r_squared(test.targets, pred);
    r.ok = std::isfinite(r.r2);
    if (!r.ok) {
        r.failure = "non-finite R2";
    }
    return r;
}

nlohmann::json probe_to_json(const ProbeReport& r) {
    nlohmann::json j{{"target", r.target},     {"features", r.features}, {"ok", r.ok},
                     {"lambda", r.lambda},     {"n_train", r.n_train},   {"n_test", r.n_test},
                     {"intercept", r.intercept}};
    j["r2"] = r.ok ? nlohmann::json(r.r2) : nlohmann::json(nullptr);
    if (!r.ok) {
        j["failure"] = r.failure;
    }
    return j;
}

}  // namespace sane::analyze
