// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "zoo/arch.hpp"
#include "zoo/zoo.hpp"

namespace sane::analyze {

/// Linear-interpolated percentile of a sorted array, q in [0, 1].
double percentile_sorted(const std::vector<double>& sorted, double q);

/// Per learnable layer: mean, std, then the 0/25/50/75/100th percentiles of
/// weights and bias together. 7 values per layer, layers concatenated.
std::vector<double> weight_statistics(const zoo::ModelCheckpoint& m);

/// All learnable parameters in layer order, bias after weights.
std::vector<double> flatten_weights(const zoo::ModelCheckpoint& m);

enum class Target { Acc, Ep, Ggap };

const char* target_name(Target t);
Target parse_target(const std::string& s);
double target_value(const zoo::ZooEntry& e, Target t);

struct ProbeData {
    std::vector<std::int64_t> model_ids;
    std::vector<std::vector<double>> features;
    std::vector<double> targets;
};

inline constexpr double kRidgeLambda = 1e-3;

struct ProbeReport {
    std::string target;
    std::string features;
    bool ok = false;
    std::string failure;
    double r2 = 0.0;
    double lambda = kRidgeLambda;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    std::vector<double> coefficients;  // on standardized features
    double intercept = 0.0;
};

/// Ridge regression on train-standardized features, scored on test.
/// Argument error with fewer than 10 train rows; Data error when a model id
/// appears in both sets. A constant target is reported with ok=false.
ProbeReport linear_probe(const ProbeData& train, const ProbeData& test,
                         double lambda = kRidgeLambda);

double r_squared(const std::vector<double>& truth, const std::vector<double>& pred);
double pearson(const std::vector<double>& x, const std::vector<double>& y);

nlohmann::json probe_to_json(const ProbeReport& r);

}  // namespace sane::analyze
