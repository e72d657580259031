// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

namespace sane::align {

/// Square linear sum assignment minimizing total cost. `cost` is row-major
/// n x n. Returns col[i] for every row i. Among all optimal assignments the
/// lexicographically smallest column sequence is returned.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n);

}  // namespace sane::align
