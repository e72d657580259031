// SPDX-License-Identifier: Apache-2.0

#include "analyze/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace sane::analyze {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double nan() { return std::numeric_limits<double>::quiet_NaN(); }


}  // namespace

std::vector<double> esd(const MatrixD& w) {
    require(w.rank() == 2 && w.size() > 0, ErrorKind::Argument, "esd needs a non-empty 2-D matrix");
    Eigen::Map<const RowMat> a(w.data(), static_cast<Eigen::Index>(w.rows()),
                               static_cast<Eigen::Index>(w.cols()));
    const RowMat gram = a.rows() <= a.cols() ? RowMat(a * a.transpose()) : RowMat(a.transpose() * a);
    Eigen::SelfAdjointEigenSolver<RowMat> solver(gram, Eigen::EigenvaluesOnly);
    require(solver.info() == Eigen::Success, ErrorKind::Numeric, "eigensolver did not converge");
    std::vector<double> out(solver.eigenvalues().data(),
                            solver.eigenvalues().data() + solver.eigenvalues().size());
    for (double& v : out) {
        v = std::max(v, 0.0);
    }
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

double log_spectral_norm(const MatrixD& w) {
    const double top = esd(w).front();
    require(top > 0.0, ErrorKind::Numeric, "log spectral norm of a zero matrix");
    return std::log10(top);
}

PowerLawFit power_law_fit_at(const std::vector<double>& values, double x_min) {
    PowerLawFit f;
    f.x_min = x_min;
    if (!(x_min > 0.0)) {
        return f;
    }
    std::vector<double> tail;
    for (double v : values) {
        if (v >= x_min) {
            tail.push_back(v);
        }
    }
    f.n_tail = tail.size();
    if (tail.size() < kMinTail) {
        return f;
    }
    std::sort(tail.begin(), tail.end());
    double log_sum = 0.0;
    for (double v : tail) {
        log_sum += std::log(v / x_min);
    }
    if (!(log_sum > 0.0)) {
        return f;
    }
    const double m = static_cast<double>(tail.size());
    f.alpha = 1.0 + m / log_sum;
    double d = 0.0;
    for (std::size_t i = 0; i < tail.size(); ++i) {
        const double cdf = 1.0 - std::pow(tail[i] / x_min, 1.0 - f.alpha);
        d = std::max({d, static_cast<double>(i + 1) / m - cdf, cdf - static_cast<double>(i) / m});
    }
    f.ks = d;
    f.ok = std::isfinite(f.alpha) && f.alpha > 1.0;
    return f;
}

PowerLawFit power_law_fit(const std::vector<double>& values) {
    std::vector<double> sorted;
    for (double v : values) {
        if (v > 0.0 && std::isfinite(v)) {
            sorted.push_back(v);
        }
    }
    std::sort(sorted.begin(), sorted.end());
    PowerLawFit best;
    best.ks = std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i + kMinTail <= sorted.size(); ++i) {
        if (i > 0 && sorted[i] == sorted[i - 1]) {
            continue;
        }
        const auto f = power_law_fit_at(sorted, sorted[i]);
        if (f.ok && f.ks < best.ks) {
            best = f;
            any = true;
        }
    }
    if (!any) {
        PowerLawFit failed;
        failed.n_tail = sorted.size();
        return failed;
    }
    return best;
}

MatrixD weight_matrix(const zoo::ModelCheckpoint& m, std::size_t layer) {
    const auto& spec = m.arch.layers.at(layer);
    require(spec.learnable(), ErrorKind::Argument, "layer has no weight matrix");
    const auto& w = m.layers.at(layer).weight;
    return MatrixD(num::Shape{spec.out, spec.row_width()},
                   std::vector<double>(w.storage().begin(), w.storage().end()));
}

SpectralReport spectral_report(const zoo::ModelCheckpoint& m) {
    SpectralReport r;
    double norm_sum = 0.0;
    double alpha_sum = 0.0;
    double walpha_sum = 0.0;
    std::size_t norm_n = 0;
    std::size_t alpha_n = 0;
    std::size_t walpha_n = 0;
    for (std::size_t i : m.arch.learnable_layers()) {
        LayerSpectrum ls;
        ls.layer = i;
        ls.eigenvalues = esd(weight_matrix(m, i));
        ls.lambda_max = ls.eigenvalues.front();
        ls.norm_ok = ls.lambda_max > 0.0;
        ls.log_spectral_norm = ls.norm_ok ? std::log10(ls.lambda_max) : nan();
        ls.fit = power_law_fit(ls.eigenvalues);
        ls.weighted_alpha = ls.fit.ok && ls.norm_ok ? ls.fit.alpha * ls.log_spectral_norm : nan();
        if (ls.norm_ok) {
            norm_sum += ls.log_spectral_norm;
            ++norm_n;
        }
        if (ls.fit.ok) {
            alpha_sum += ls.fit.alpha;
            ++alpha_n;
        } else {
            ++r.failed_fits;
        }
        if (std::isfinite(ls.weighted_alpha)) {
            walpha_sum += ls.weighted_alpha;
            ++walpha_n;
        }
        r.layers.push_back(std::move(ls));
    }
    r.mean_log_spectral_norm = norm_n ? norm_sum / double(norm_n) : nan();
    r.mean_alpha = alpha_n ? alpha_sum / double(alpha_n) : nan();
    r.mean_weighted_alpha = walpha_n ? walpha_sum / double(walpha_n) : nan();
    return r;
}

nlohmann::json spectral_to_json(const SpectralReport& r) {
    // JSON has no NaN; flagged values become null
    auto num_or_null = [](double v) -> nlohmann::json {
        return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    };
    nlohmann::json j;
    j["mean_log_spectral_norm"] = num_or_null(r.mean_log_spectral_norm);
    j["mean_alpha"] = num_or_null(r.mean_alpha);
    j["mean_weighted_alpha"] = num_or_null(r.mean_weighted_alpha);
    j["failed_fits"] = r.failed_fits;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : r.layers) {
        j["layers"].push_back({{"layer", l.layer},
                               {"lambda_max", l.lambda_max},
                               {"log_spectral_norm", num_or_null(l.log_spectral_norm)},
                               {"fit_ok", l.fit.ok},
                               {"alpha", l.fit.ok ? num_or_null(l.fit.alpha) : nullptr},
                               {"x_min", l.fit.ok ? num_or_null(l.fit.x_min) : nullptr},
                               {"ks", l.fit.ok ? num_or_null(l.fit.ks) : nullptr},
                               {"n_tail", l.fit.n_tail},
                               {"weighted_alpha", num_or_null(l.weighted_alpha)}});
    }
    return j;
}

}  // namespace sane::analyze
