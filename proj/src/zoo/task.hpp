// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics/tensor.hpp"

namespace sane::zoo {

/// Synthetic classification problems small enough to train hundreds of base
/// models on a desktop CPU.
struct TaskSpec {
    std::string generator = "two-rings";  // gaussian-blobs | two-rings | proc-digits
    std::size_t classes = 2;
    std::size_t input_dim = 2;  // feature count for the 2-D generators
    double noise = 0.2;
    std::uint64_t seed = 7;
    std::size_t n_train = 1000;
    std::size_t n_val = 500;
    std::size_t n_test = 1000;

    /// {D} for point clouds, {1,8,8} for proc-digits.
    std::vector<std::size_t> input_shape() const;
    std::string id() const;
    void validate() const;
};

nlohmann::json task_to_json(const TaskSpec& t);
TaskSpec task_from_json(const nlohmann::json& j);

struct Dataset {
    num::TensorF inputs;  // [n x input_size]
    std::vector<std::int64_t> labels;

    std::size_t size() const { return labels.size(); }
    Dataset slice(std::size_t begin, std::size_t end) const;
};

/// Deterministic in (spec, n, stream). Labels cycle through the classes before
/// shuffling, so counts are balanced within one sample.
Dataset generate_task(const TaskSpec& spec, std::size_t n, std::uint64_t stream = 0);

struct TaskData {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Train/val/test drawn from independent streams of the same generator.
TaskData generate_splits(const TaskSpec& spec);

}  // namespace sane::zoo
