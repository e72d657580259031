// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

namespace sane::analyze {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

struct PlotSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool lines = false;  // connect points in x order
};

/// Self-contained SVG. Non-finite points are dropped.
std::string svg_plot(const std::vector<Series>& series, const PlotSpec& spec);

}  // namespace sane::analyze
