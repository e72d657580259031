// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "numerics/tensor.hpp"
#include "zoo/arch.hpp"

namespace sane::analyze {

using MatrixD = num::Tensor<double>;

/// Squared singular values of a 2-D matrix, descending. Tiny negative
/// round-off from the Gram eigensolve is clamped to zero.
std::vector<double> esd(const MatrixD& w);

/// log10 of the largest ESD eigenvalue. Numeric error on an all-zero matrix.
double log_spectral_norm(const MatrixD& w);

struct PowerLawFit {
    bool ok = false;
    double alpha = 0.0;
    double x_min = 0.0;
    double ks = 0.0;
    std::size_t n_tail = 0;
};

inline constexpr std::size_t kMinTail = 10;

/// Hill estimate of the density exponent for tail values >= x_min.
PowerLawFit power_law_fit_at(const std::vector<double>& values, double x_min);

/// Hill estimate with x_min chosen over the distinct positive values to
/// minimize the Kolmogorov-Smirnov distance. `ok` is false when no candidate
/// leaves at least kMinTail tail points.
PowerLawFit power_law_fit(const std::vector<double>& values);

struct LayerSpectrum {
    std::size_t layer = 0;
    std::vector<double> eigenvalues;
    double lambda_max = 0.0;
    bool norm_ok = false;
    double log_spectral_norm = 0.0;
    PowerLawFit fit;
    double weighted_alpha = 0.0;  // alpha * log10(lambda_max); valid when fit.ok && norm_ok
};

struct SpectralReport {
    std::vector<LayerSpectrum> layers;
    double mean_log_spectral_norm = 0.0;
    double mean_alpha = 0.0;
    double mean_weighted_alpha = 0.0;
    std::size_t failed_fits = 0;
};

/// Weight matrix of a learnable layer as [out x row_width], bias excluded.
MatrixD weight_matrix(const zoo::ModelCheckpoint& m, std::size_t layer);

SpectralReport spectral_report(const zoo::ModelCheckpoint& m);

/// Layer means skip flagged entries; a mean with no contributors is NaN.
nlohmann::json spectral_to_json(const SpectralReport& r);

}  // namespace sane::analyze
