// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "zoo/arch.hpp"
#include "zoo/zoo.hpp"

namespace sane::align {

using zoo::ModelCheckpoint;
using zoo::Permutations;

/// Unit counts of every permutable boundary (outputs of each learnable layer but the last).
std::vector<std::size_t> boundary_widths(const zoo::Architecture& arch);
Permutations identity_permutations(const zoo::Architecture& arch);
Permutations invert(const Permutations& p);

/// New unit i of boundary b is old unit p[b][i]: rows (and bias, and the BN
/// buffers that follow) of the producing layer and the matching input
/// channels of the consuming layer move together.
ModelCheckpoint apply_permutation(const ModelCheckpoint& m, const Permutations& p);

/// Squared L2 distance over all weights and biases.
double squared_distance(const ModelCheckpoint& a, const ModelCheckpoint& b);

struct MatchResult {
    Permutations perms;
    std::size_t sweeps = 0;
    double residual = 0.0;              // ||vec(a) - vec(pi(b))||^2 at the end
    std::vector<double> residual_trace;  // after every boundary update
};

/// Coordinate descent over boundaries; each step is an exact assignment.
MatchResult weight_matching(const ModelCheckpoint& ref, const ModelCheckpoint& b,
                            std::size_t max_sweeps = 50);

struct AlignStats {
    std::int64_t model_id = 0;
    double distance_before = 0.0;  // L2 (not squared) at the last snapshot
    double distance_after = 0.0;
};

/// Lowest model id in the training split.
std::int64_t default_reference(const zoo::ZooManifest& m);

/// Permutations come from each model's last snapshot and are applied to all
/// of its snapshots. The reference keeps the identity.
std::vector<AlignStats> align_zoo(zoo::Zoo& zoo, std::int64_t reference_id,
                                  std::size_t max_sweeps, std::size_t workers);

}  // namespace sane::align
