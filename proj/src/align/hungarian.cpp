// SPDX-License-Identifier: Apache-2.0

#include "align/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "common/error.hpp"

namespace sane::align {

namespace {

// Shortest augmenting path Hungarian method with row/column potentials.
// Indices are 1-based internally; row 0 and column 0 are sentinels.
void potentials(const std::vector<double>& cost, std::size_t n, std::vector<double>& u,
                std::vector<double>& v) {
    const double inf = std::numeric_limits<double>::infinity();
    u.assign(n + 1, 0.0);
    v.assign(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0);
    std::vector<std::size_t> way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
}

// Kuhn augmenting path restricted to allowed edges and free rows >= `from`.
bool augment(std::size_t row, const std::vector<std::vector<std::size_t>>& adj,
             std::vector<long>& match_col, std::vector<char>& seen,
             const std::vector<char>& col_locked) {
    for (std::size_t j : adj[row]) {
        if (seen[j] || col_locked[j]) {
            continue;
        }
        seen[j] = 1;
        if (match_col[j] < 0 ||
            augment(static_cast<std::size_t>(match_col[j]), adj, match_col, seen, col_locked)) {
            match_col[j] = static_cast<long>(row);
            return true;
        }
    }
    return false;
}

// Does rows [from, n) have a perfect matching into unlocked columns?
bool has_perfect_matching(std::size_t from, std::size_t n,
                          const std::vector<std::vector<std::size_t>>& adj,
                          const std::vector<char>& col_locked) {
    std::vector<long> match_col(n, -1);
    for (std::size_t i = from; i < n; ++i) {
        std::vector<char> seen(n, 0);
        if (!augment(i, adj, match_col, seen, col_locked)) {
            return false;
        }
    }
    return true;
}

}  // namespace

std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t n) {
    require(cost.size() == n * n, ErrorKind::Dimension, "assignment cost must be n x n");
    if (n == 0) {
        return {};
    }
    for (double c : cost) {
        require(std::isfinite(c), ErrorKind::Numeric, "assignment cost must be finite");
    }
    std::vector<double> u;
    std::vector<double> v;
    potentials(cost, n, u, v);

    // Every optimal assignment lives in the equality subgraph of optimal duals.
    double scale = 1.0;
    for (double c : cost) {
        scale = std::max(scale, std::abs(c));
    }
    const double tol = 1e-9 * scale;
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(cost[i * n + j] - u[i + 1] - v[j + 1]) <= tol) {
                adj[i].push_back(j);
            }
        }
    }

    // Greedy lexicographic choice, keeping a perfect matching feasible.
    std::vector<std::size_t> out(n, 0);
    std::vector<char> locked(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        bool placed = false;
        for (std::size_t j : adj[i]) {
            if (locked[j]) {
                continue;
            }
            locked[j] = 1;
            if (has_perfect_matching(i + 1, n, adj, locked)) {
                out[i] = j;
                placed = true;
                break;
            }
            locked[j] = 0;
        }
        if (!placed) {
            fail(ErrorKind::Numeric, "assignment: equality subgraph lost its perfect matching");
        }
    }
    return out;
}

}  // namespace sane::align
